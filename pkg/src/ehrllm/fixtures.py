"""Synthetic, schema-compatible stand-ins for the credentialed source tables.

Nothing here is real patient data. Column names and join keys follow the
public table layouts (PATIENTS, PRESCRIPTIONS, DIAGNOSES_ICD,
D_ICD_DIAGNOSES); values are drawn from small made-up vocabularies with a
seeded generator, so a given ``(n_patients, seed)`` always yields the same
files. Dates of birth are shifted into the 2100s the way de-identified
exports shift them, which is why analyses use a synthesized DOB_Demo column
instead.
"""

from __future__ import annotations

import csv
import datetime as dt
import json
from pathlib import Path

from ehrllm.rng import SplitMix64, derive_seed

PATIENTS_COLUMNS = ["ROW_ID", "SUBJECT_ID", "GENDER", "DOB", "DOD", "EXPIRE_FLAG"]
PRESCRIPTIONS_COLUMNS = [
    "ROW_ID", "SUBJECT_ID", "HADM_ID", "STARTDATE", "ENDDATE", "DRUG_TYPE", "DRUG",
    "DRUG_NAME_POE", "DRUG_NAME_GENERIC", "FORMULARY_DRUG_CD", "GSN", "NDC", "PROD_STRENGTH",
    "DOSE_VAL_RX", "DOSE_UNIT_RX", "FORM_VAL_DISP", "FORM_UNIT_DISP", "ROUTE",
]
DIAGNOSES_COLUMNS = ["ROW_ID", "SUBJECT_ID", "HADM_ID", "SEQ_NUM", "ICD9_CODE"]
D_ICD_COLUMNS = ["ROW_ID", "ICD9_CODE", "SHORT_TITLE", "LONG_TITLE"]

# Identifier-like columns that must stay strings (leading zeros, letter codes).
STRING_KINDS = {"ICD9_CODE": "string", "NDC": "string", "GSN": "string", "FORMULARY_DRUG_CD": "string"}

# The 23 features kept in the analysis dataset, in output order.
ANALYSIS_COLUMNS = [
    "SUBJECT_ID", "GENDER", "DOB_Demo", "DOD", "EXPIRE_FLAG", "HADM_ID", "STARTDATE", "ENDDATE",
    "DRUG_TYPE", "DRUG", "DRUG_NAME_GENERIC", "FORMULARY_DRUG_CD", "PROD_STRENGTH", "DOSE_VAL_RX",
    "DOSE_UNIT_RX", "ROUTE", "NDC", "SEQ_NUM", "ICD9_CODE", "SHORT_TITLE", "LONG_TITLE",
    "FORM_VAL_DISP", "FORM_UNIT_DISP",
]

# (drug, generic, strength, dose choices, unit, form unit, route, formulary code, gsn, ndc)
_DRUGS = [
    ("Aspirin", "aspirin", "81mg Tab", (81, 325), "mg", "TAB", "PO", "ASA81", "004380", "00904404073"),
    ("Heparin", "heparin sodium", "5000 Units / mL", (5000,), "UNIT", "mL", "SC", "HEPA5I", "006549", "63323026201"),
    ("Metoprolol Tartrate", "metoprolol tartrate", "25mg Tab", (12.5, 25, 50), "mg", "TAB", "PO", "METO25", "005132", "51079025520"),
    ("Furosemide", "furosemide", "20mg Tab", (20, 40), "mg", "TAB", "IV", "FURO20", "008208", "00054429731"),
    ("Insulin", "insulin regular human", "100 Units / mL", (2, 4, 6, 8), "UNIT", "VIAL", "SC", "INSULIN", "027491", "00002831501"),
    ("Vancomycin", "vancomycin hcl", "1g Vial", (1000, 1250), "mg", "VIAL", "IV", "VANC1F", "009327", "00409653201"),
    ("Acetaminophen", "acetaminophen", "325mg Tab", (325, 650), "mg", "TAB", "PO", "ACET325", "004489", "00182844789"),
    ("Potassium Chloride", "potassium chloride", "20mEq Packet", (20, 40), "mEq", "PKT", "PO", "KCL20P", "001275", "58177000111"),
    ("Pantoprazole", "pantoprazole sodium", "40mg Tab", (40,), "mg", "TAB", "PO", "PANT40", "027462", "00008084181"),
    ("Warfarin", "warfarin sodium", "5mg Tab", (2.5, 5), "mg", "TAB", "PO", "WARF5", "006562", "00056017270"),
    ("Morphine Sulfate", "morphine sulfate", "2mg Syringe", (2, 4), "mg", "SYR", "IV", "MORP2I", "016025", "00409189001"),
    ("Lisinopril", "lisinopril", "10mg Tab", (5, 10, 20), "mg", "TAB", "PO", "LISI10", "000390", "00172375860"),
]

_DIAGNOSES = [
    ("4019", "Hypertension NOS", "Unspecified essential hypertension"),
    ("4280", "CHF NOS", "Congestive heart failure, unspecified"),
    ("25000", "DMII wo cmp nt st uncntr", "Diabetes mellitus without mention of complication, type II or unspecified type"),
    ("5849", "Acute kidney failure NOS", "Acute kidney failure, unspecified"),
    ("486", "Pneumonia, organism NOS", "Pneumonia, organism unspecified"),
    ("99591", "Sepsis", "Sepsis"),
    ("41401", "Crnry athrscl natve vssl", "Coronary atherosclerosis of native coronary artery"),
    ("42731", "Atrial fibrillation", "Atrial fibrillation"),
    ("5859", "Chronic kidney dis NOS", "Chronic kidney disease, unspecified, with renal involvement"),
    ("2724", "Hyperlipidemia NEC/NOS", "Other and unspecified hyperlipidemia"),
    ("V5861", "Long-term use anticoagul", "Long-term (current) use of anticoagulants"),
    ("0389", "Septicemia NOS", "Unspecified septicemia"),
]


def _date(rng: SplitMix64, start: dt.date, span_days: int) -> dt.date:
    return start + dt.timedelta(days=rng.integer(0, span_days))


def _write(path: Path, header: list[str], rows: list[list]) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(["" if v is None else v for v in row])


def patients_rows(n_patients: int, seed: int) -> list[list]:
    rng = SplitMix64(derive_seed(seed, "patients"))
    rows = []
    for i in range(n_patients):
        dob = _date(rng, dt.date(2050, 1, 1), 365 * 70)
        expired = rng.below(3) == 0
        dod = dob + dt.timedelta(days=365 * 60 + rng.integer(0, 365 * 30)) if expired else None
        rows.append([
            i + 1, 1000 + 7 * i, rng.choice(["F", "M"]),
            f"{dob.isoformat()} 00:00:00", f"{dod.isoformat()} 00:00:00" if dod else None, int(expired),
        ])
    return rows


def write_patients(path: str | Path, n_patients: int, seed: int = 0) -> None:
    _write(Path(path), PATIENTS_COLUMNS, patients_rows(n_patients, seed))


def write_fixture_dataset(directory: str | Path, n_patients: int = 500, seed: int = 0) -> dict[str, Path]:
    """Write the four source CSVs; returns their paths keyed by table name.

    Roughly one patient in ten has no prescriptions and a similar share has no
    diagnoses, so the left joins produce null-padded rows.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    patients = patients_rows(n_patients, seed)
    rng = SplitMix64(derive_seed(seed, "events"))
    rx_rows, dx_rows = [], []
    for p in patients:
        subject = p[1]
        hadm = 100000 + subject
        admit = _date(rng, dt.date(2120, 1, 1), 365 * 10)
        for _ in range(rng.below(5) if rng.below(10) else 0):
            drug = rng.choice(_DRUGS)
            start = admit + dt.timedelta(days=rng.below(5))
            dose = rng.choice(drug[3])
            rx_rows.append([
                len(rx_rows) + 1, subject, hadm, f"{start} 00:00:00",
                f"{start + dt.timedelta(days=1 + rng.below(6))} 00:00:00",
                "MAIN", drug[0], drug[0], drug[1], drug[7], drug[8], drug[9], drug[2],
                dose, drug[4], 1, drug[5], drug[6],
            ])
        codes = [] if rng.below(10) == 0 else rng.sample_indices(len(_DIAGNOSES), 1 + rng.below(3))
        for seq, ci in enumerate(codes, 1):
            dx_rows.append([len(dx_rows) + 1, subject, hadm, seq, _DIAGNOSES[ci][0]])
    d_icd_rows = [[i + 1, *d] for i, d in enumerate(_DIAGNOSES)]

    paths = {
        "patients": directory / "PATIENTS.csv",
        "prescriptions": directory / "PRESCRIPTIONS.csv",
        "diagnoses": directory / "DIAGNOSES_ICD.csv",
        "d_icd": directory / "D_ICD_DIAGNOSES.csv",
    }
    _write(paths["patients"], PATIENTS_COLUMNS, patients)
    _write(paths["prescriptions"], PRESCRIPTIONS_COLUMNS, rx_rows)
    _write(paths["diagnoses"], DIAGNOSES_COLUMNS, dx_rows)
    _write(paths["d_icd"], D_ICD_COLUMNS, d_icd_rows)
    return paths


def stub_records_from_pairs(pairs: list[tuple[str, str]]) -> list[dict]:
    """Exact-prompt stub rules, one per (prompt, reply) pair."""
    return [{"prompt": p, "reply": r} for p, r in pairs]


def write_jsonl(records: list[dict], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps(r, ensure_ascii=False) + "\n" for r in records), encoding="utf-8")
