"""Run configuration file (YAML).

Relative paths resolve against the directory holding the config file. The
keys under ``dataset`` mirror the study-design summary one to one::

    dataset:
      data_source: "MIMIC-III (synthetic fixture)"
      data_modality: "structured and unstructured"
      structured_tables: {patients: ..., prescriptions: ..., diagnoses: ..., d_icd: ...}
      unstructured_source: note.txt
      n_patients: 101
      total_records: null          # expected merged row count; checked when set
      features: [SUBJECT_ID, ...]  # kept columns (23)
      join_keys: [SUBJECT_ID, ICD9_CODE]
      structured_format: csv
      unstructured_format: text
      chunking: {chunk_size: 400, overlap: 50}
      embedding_model: {kind: hash, dimension: 4096}
      vector_index: exact
      dob: {column: DOB_Demo, range: [1930-01-01, 2000-12-31]}
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from ehrllm.agent import RepairPolicy
from ehrllm.fixtures import ANALYSIS_COLUMNS, STRING_KINDS
from ehrllm.gateway import EndpointConfig
from ehrllm.rag import ChunkingConfig, HashEmbedder, RemoteEmbedder, RetrievalConfig
from ehrllm.tabular import CohortConfig

TABLE_NAMES = ("patients", "prescriptions", "diagnoses", "d_icd")
JOIN_KEYS = ["SUBJECT_ID", "ICD9_CODE"]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EmbedderConfig:
    kind: str = "hash"
    dimension: int = 4096
    base_url: str | None = None
    model: str | None = None
    credential_ref: str | None = None

    def build(self):
        if self.kind == "hash":
            return HashEmbedder(self.dimension)
        if self.kind == "remote":
            if not self.base_url or not self.model:
                raise ConfigError("remote embedder needs base_url and model")
            return RemoteEmbedder(self.base_url, self.model, self.dimension, self.credential_ref)
        raise ConfigError(f"unknown embedder kind {self.kind!r} (hash or remote)")


@dataclass(frozen=True)
class RunConfig:
    base_dir: Path
    data_source: str
    data_modality: str
    tables: dict[str, Path]
    note: Path | None
    cohort: CohortConfig
    total_records: int | None
    features: list[str]
    column_kinds: dict[str, str]
    chunking: ChunkingConfig
    embedder: EmbedderConfig
    retrieval: RetrievalConfig
    reference_date: dt.date
    n_structured: int
    n_segments: int
    structured_templates: Path | None
    question_rules: Path | None
    generator_model: str | None
    repair: RepairPolicy
    models: dict[str, EndpointConfig]
    seed: int
    workers: int
    output_dir: Path
    extra: dict[str, Any] = field(default_factory=dict)

    def endpoint(self, model_id: str) -> EndpointConfig:
        if model_id not in self.models:
            known = ", ".join(sorted(self.models)) or "(none)"
            raise KeyError(f"unknown model id {model_id!r}; configured: {known}")
        return self.models[model_id]


def _date(value: Any, what: str) -> dt.date:
    if isinstance(value, dt.date):
        return value
    try:
        return dt.date.fromisoformat(str(value))
    except ValueError:
        raise ConfigError(f"{what}: not an ISO date: {value!r}") from None


def _section(raw: dict, key: str) -> dict:
    value = raw.get(key) or {}
    if not isinstance(value, dict):
        raise ConfigError(f"'{key}' must be a mapping")
    return value


def parse_config(raw: dict, base_dir: Path) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")

    def path(value) -> Path | None:
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else base_dir / p

    ds = _section(raw, "dataset")
    tables_raw = _section(ds, "structured_tables")
    missing = [t for t in TABLE_NAMES if t not in tables_raw]
    if tables_raw and missing:
        raise ConfigError(f"dataset.structured_tables is missing {', '.join(missing)}")
    join_keys = ds.get("join_keys", JOIN_KEYS)
    if list(join_keys) != JOIN_KEYS:
        raise ConfigError(f"dataset.join_keys must be {JOIN_KEYS}; other join chains are not supported")
    for key, allowed in (("structured_format", "csv"), ("unstructured_format", "text"), ("vector_index", "exact")):
        if ds.get(key, allowed) != allowed:
            raise ConfigError(f"dataset.{key}: only {allowed!r} is supported")

    dob = _section(ds, "dob")
    dob_range = dob.get("range", ["1930-01-01", "2000-12-31"])
    seed = int(raw.get("seed", 0))
    try:
        cohort = CohortConfig(
            n_patients=int(ds.get("n_patients", 101)),
            seed=seed,
            dob_range=(_date(dob_range[0], "dob.range"), _date(dob_range[1], "dob.range")),
            dob_column_name=dob.get("column", "DOB_Demo"),
        )
        chunking = ChunkingConfig(**_section(ds, "chunking"))
        retrieval = RetrievalConfig(**_section(raw, "retrieval"))
        repair = RepairPolicy(**_section(raw, "agent"))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None

    models = {}
    for model_id, spec in _section(raw, "models").items():
        spec = dict(spec or {})
        if spec.get("script"):
            spec["script"] = str(path(spec["script"]))
        try:
            models[str(model_id)] = EndpointConfig(endpoint_id=str(model_id), **spec)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"models.{model_id}: {exc}") from None

    tg = _section(raw, "testgen")
    workers = int(raw.get("workers", 1))
    if workers < 1:
        raise ConfigError("workers must be >= 1")
    return RunConfig(
        base_dir=base_dir,
        data_source=str(ds.get("data_source", "")),
        data_modality=str(ds.get("data_modality", "")),
        tables={t: path(tables_raw[t]) for t in TABLE_NAMES if t in tables_raw},
        note=path(ds.get("unstructured_source")),
        cohort=cohort,
        total_records=ds.get("total_records"),
        features=list(ds.get("features") or ANALYSIS_COLUMNS),
        column_kinds={**STRING_KINDS, **(ds.get("column_kinds") or {})},
        chunking=chunking,
        embedder=EmbedderConfig(**_section(ds, "embedding_model")),
        retrieval=retrieval,
        reference_date=_date(raw.get("reference_date", "2024-01-01"), "reference_date"),
        n_structured=int(tg.get("n_structured", 30)),
        n_segments=int(tg.get("n_segments", 50)),
        structured_templates=path(tg.get("structured_templates")),
        question_rules=path(tg.get("question_rules")),
        generator_model=tg.get("model"),
        repair=repair,
        models=models,
        seed=seed,
        workers=workers,
        output_dir=path(raw.get("output_dir", "out")),
    )


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such config file: {path}")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(raw, path.parent.resolve())


def default_config_text(note: str = "note.txt", tables_dir: str = "tables") -> str:
    """A config for the fixture layout written by ``ehrllm fixtures``."""
    features = "\n".join(f"    - {c}" for c in ANALYSIS_COLUMNS)
    return f"""\
# Offline run configuration. Relative paths resolve against this file.
seed: 0
workers: 1
output_dir: out
reference_date: 2024-01-01

dataset:
  data_source: "MIMIC-III schema, synthetic fixture"
  data_modality: "structured and unstructured clinical data"
  structured_tables:
    patients: {tables_dir}/PATIENTS.csv
    prescriptions: {tables_dir}/PRESCRIPTIONS.csv
    diagnoses: {tables_dir}/DIAGNOSES_ICD.csv
    d_icd: {tables_dir}/D_ICD_DIAGNOSES.csv
  unstructured_source: {note}
  n_patients: 101
  total_records: null
  features:
{features}
  join_keys: [SUBJECT_ID, ICD9_CODE]
  structured_format: csv
  unstructured_format: text
  chunking: {{chunk_size: 400, overlap: 50}}
  embedding_model: {{kind: hash, dimension: 4096}}
  vector_index: exact
  dob: {{column: DOB_Demo, range: [1930-01-01, 2000-12-31]}}

testgen:
  n_structured: 30
  n_segments: 50
  model: null

retrieval: {{k: 4}}
agent: {{max_repairs: 1}}

models:
  gold_stub:
    kind: scripted_stub
    script: stubs/gold_stub.jsonl
  echo_stub:
    kind: scripted_stub
    script: stubs/echo_stub.jsonl
  # remote:
  #   kind: http_chat
  #   base_url: https://api.example.com/v1
  #   model: some-model
  #   credential_ref: MODEL_API_KEY
  #   budget: 200000
"""
