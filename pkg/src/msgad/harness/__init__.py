"""Experiment orchestration: records, references, scans and the CLI."""

from .record import RunRecord

__all__ = ["RunRecord"]
