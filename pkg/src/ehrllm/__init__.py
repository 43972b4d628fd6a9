"""LLM pipelines for clinical tables and notes, with synthetic test suites and scoring."""

__version__ = "0.1.0"
