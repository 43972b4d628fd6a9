"""Restricted query language: parse, validate, execute."""

from ehrllm.query.ast import Program, operation_count, to_text
from ehrllm.query.engine import (
    DivisionByZeroError,
    EmptyAggregateError,
    ExecutionContext,
    ExecutionError,
    NegativeAgeError,
    TypeMismatchError,
    UnknownColumnError,
    ValidatedProgram,
    ValidationError,
    execute_program,
    validate_program,
    years_between,
)
from ehrllm.query.grammar import EBNF, SUMMARY
from ehrllm.query.parser import ParseError, parse_program

__all__ = [
    "DivisionByZeroError",
    "EBNF",
    "EmptyAggregateError",
    "ExecutionContext",
    "ExecutionError",
    "NegativeAgeError",
    "ParseError",
    "Program",
    "SUMMARY",
    "TypeMismatchError",
    "UnknownColumnError",
    "ValidatedProgram",
    "ValidationError",
    "execute_program",
    "operation_count",
    "parse_program",
    "to_text",
    "validate_program",
    "years_between",
]
