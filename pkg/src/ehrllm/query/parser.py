"""Tokenizer and recursive-descent parser for query programs.

Keywords are matched case-insensitively and only where the grammar expects
them, so a column may share a name with a keyword. Anything that is not a
plain identifier can be written in backticks (a literal backtick is doubled).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

from ehrllm.query.ast import (
    AGG_FUNCS,
    Aggregate,
    BinOp,
    ColumnRef,
    Derive,
    Filter,
    GroupBy,
    Limit,
    Neg,
    Number,
    Program,
    RefDate,
    Select,
    Sort,
    Stage,
    YearsBetween,
)

MAX_PROGRAM_CHARS = 4000
MAX_STAGES = 32


class ParseError(ValueError):
    def __init__(self, message: str, line: int = 1, column: int = 1, token: str | None = None):
        self.message = message
        self.line = line
        self.column = column
        self.token = token
        where = f"line {line}, column {column}"
        got = f" (at {token!r})" if token is not None else ""
        super().__init__(f"{message} at {where}{got}")


@dataclass(frozen=True)
class Token:
    kind: str  # IDENT, QIDENT, NUMBER, STRING, REF, SYM, EOF
    text: str
    value: object
    line: int
    col: int


_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<number>\d+(?:\.\d+)?(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<qident>`(?:[^`]|``)*`)
  | (?P<string>"(?:[^"\\\n]|\\.)*")
  | (?P<ref>@ref\b)
  | (?P<sym>==|!=|<=|>=|<|>|=|\||\(|\)|,|\*|\+|-|/)
    """,
    re.VERBOSE,
)

_ESCAPES = {"n": "\n", "t": "\t", "r": "\r", '"': '"', "\\": "\\"}


def _unescape(body: str, line: int, col: int) -> str:
    out = []
    i = 0
    while i < len(body):
        ch = body[i]
        if ch == "\\":
            nxt = body[i + 1]
            if nxt not in _ESCAPES:
                raise ParseError(f"unknown escape \\{nxt}", line, col + i + 1, "\\" + nxt)
            out.append(_ESCAPES[nxt])
            i += 2
        else:
            out.append(ch)
            i += 1
    return "".join(out)


def tokenize_program(text: str) -> list[Token]:
    tokens = []
    pos, line, line_start = 0, 1, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        col = pos - line_start + 1
        if not m:
            raise ParseError("unexpected character", line, col, text[pos])
        kind = m.lastgroup
        lexeme = m.group()
        if kind == "ws":
            pass
        elif kind == "number":
            value = float(lexeme) if any(c in lexeme for c in ".eE") else int(lexeme)
            if isinstance(value, float) and not math.isfinite(value):
                raise ParseError("number out of range", line, col, lexeme)
            tokens.append(Token("NUMBER", lexeme, value, line, col))
        elif kind == "ident":
            tokens.append(Token("IDENT", lexeme, lexeme, line, col))
        elif kind == "qident":
            name = lexeme[1:-1].replace("``", "`")
            if not name:
                raise ParseError("empty quoted identifier", line, col, lexeme)
            tokens.append(Token("QIDENT", lexeme, name, line, col))
        elif kind == "string":
            tokens.append(Token("STRING", lexeme, _unescape(lexeme[1:-1], line, col + 1), line, col))
        elif kind == "ref":
            tokens.append(Token("REF", lexeme, None, line, col))
        else:
            tokens.append(Token("SYM", lexeme, lexeme, line, col))
        newlines = lexeme.count("\n")
        if newlines:
            line += newlines
            line_start = pos + lexeme.rindex("\n") + 1
        pos = m.end()
    tokens.append(Token("EOF", "", None, line, pos - line_start + 1))
    return tokens


class _Parser:
    def __init__(self, tokens: list[Token]):
        self.tokens = tokens
        self.i = 0

    @property
    def tok(self) -> Token:
        return self.tokens[self.i]

    def advance(self) -> Token:
        t = self.tokens[self.i]
        self.i += 1
        return t

    def fail(self, message: str):
        t = self.tok
        raise ParseError(message, t.line, t.col, t.text if t.kind != "EOF" else "<end of input>")

    def at_keyword(self, word: str) -> bool:
        return self.tok.kind == "IDENT" and self.tok.text.upper() == word

    def keyword(self, word: str) -> None:
        if not self.at_keyword(word):
            self.fail(f"expected {word}")
        self.advance()

    def at_sym(self, sym: str) -> bool:
        return self.tok.kind == "SYM" and self.tok.text == sym

    def sym(self, sym: str) -> None:
        if not self.at_sym(sym):
            self.fail(f"expected '{sym}'")
        self.advance()

    def name(self) -> str:
        if self.tok.kind not in ("IDENT", "QIDENT"):
            self.fail("expected a column name")
        return self.advance().value

    def name_list(self) -> tuple[str, ...]:
        names = [self.name()]
        while self.at_sym(","):
            self.advance()
            names.append(self.name())
        return tuple(names)

    # program := stage ("|" stage)*
    def program(self) -> Program:
        stages = [self.stage()]
        while self.at_sym("|"):
            self.advance()
            stages.append(self.stage())
            if len(stages) > MAX_STAGES:
                self.fail(f"program has more than {MAX_STAGES} stages")
        if self.tok.kind != "EOF":
            self.fail("expected '|' or end of program")
        return Program(tuple(stages))

    def stage(self) -> Stage:
        if self.tok.kind != "IDENT":
            self.fail("expected a stage keyword")
        word = self.tok.text.upper()
        handler = {
            "FILTER": self.filter_stage,
            "DERIVE": self.derive_stage,
            "GROUP": self.group_stage,
            "AGGREGATE": self.aggregate_stage,
            "SELECT": self.select_stage,
            "SORT": self.sort_stage,
            "LIMIT": self.limit_stage,
        }.get(word)
        if handler is None:
            self.fail("unknown stage keyword")
        self.advance()
        return handler()

    def filter_stage(self) -> Filter:
        column = self.name()
        t = self.tok
        if t.kind == "SYM" and t.text in ("==", "!=", "<", "<=", ">", ">="):
            op = self.advance().text
        elif self.at_keyword("CONTAINS"):
            self.advance()
            op = "CONTAINS"
        else:
            self.fail("expected a comparator")
        return Filter(column, op, self.literal())

    def literal(self):
        t = self.tok
        if t.kind == "STRING":
            return self.advance().value
        if t.kind == "NUMBER":
            return self.advance().value
        if self.at_sym("-") and self.tokens[self.i + 1].kind == "NUMBER":
            self.advance()
            return -self.advance().value
        if self.at_keyword("TRUE") or self.at_keyword("FALSE"):
            return self.advance().text.upper() == "TRUE"
        self.fail("expected a literal")

    def derive_stage(self) -> Derive:
        name = self.name()
        self.sym("=")
        return Derive(name, self.expr())

    # expr := term (("+"|"-") term)* ; term := factor (("*"|"/") factor)*
    def expr(self):
        node = self.term()
        while self.tok.kind == "SYM" and self.tok.text in ("+", "-"):
            op = self.advance().text
            node = BinOp(op, node, self.term())
        return node

    def term(self):
        node = self.factor()
        while self.tok.kind == "SYM" and self.tok.text in ("*", "/"):
            op = self.advance().text
            node = BinOp(op, node, self.factor())
        return node

    def factor(self):
        t = self.tok
        if t.kind == "NUMBER":
            return Number(self.advance().value)
        if self.at_sym("-"):
            self.advance()
            if self.tok.kind == "NUMBER":
                return Number(-self.advance().value)
            return Neg(self.factor())
        if self.at_sym("("):
            self.advance()
            node = self.expr()
            self.sym(")")
            return node
        if t.kind == "IDENT" and t.text.upper() == "YEARS_BETWEEN" and self.tokens[self.i + 1].text == "(":
            self.advance()
            self.sym("(")
            column = self.name()
            self.sym(",")
            if self.tok.kind == "REF":
                self.advance()
                ref = RefDate()
            elif self.tok.kind == "STRING":
                ref = self.advance().value
            else:
                self.fail("expected @ref or a date string")
            self.sym(")")
            return YearsBetween(column, ref)
        if t.kind in ("IDENT", "QIDENT"):
            return ColumnRef(self.advance().value)
        self.fail("expected a number, column or '('")

    def group_stage(self) -> GroupBy:
        self.keyword("BY")
        return GroupBy(self.name_list())

    def aggregate_stage(self) -> Aggregate:
        if self.tok.kind != "IDENT" or self.tok.text.upper() not in AGG_FUNCS:
            self.fail(f"expected one of {', '.join(AGG_FUNCS)}")
        func = self.advance().text.upper()
        self.sym("(")
        if self.at_sym("*"):
            self.advance()
            target = None
        else:
            target = self.name()
        self.sym(")")
        return Aggregate(func, target)

    def select_stage(self) -> Select:
        return Select(self.name_list())

    def sort_stage(self) -> Sort:
        column = self.name()
        descending = False
        if self.at_keyword("ASC"):
            self.advance()
        elif self.at_keyword("DESC"):
            self.advance()
            descending = True
        return Sort(column, descending)

    def limit_stage(self) -> Limit:
        if self.tok.kind != "NUMBER" or not isinstance(self.tok.value, int):
            self.fail("expected a non-negative integer")
        return Limit(self.advance().value)


def parse_program(text: str) -> Program:
    """Parse program text into a :class:`Program`; raises :class:`ParseError`."""
    if len(text) > MAX_PROGRAM_CHARS:
        raise ParseError(f"program longer than {MAX_PROGRAM_CHARS} characters", 1, 1)
    return _Parser(tokenize_program(text)).program()
