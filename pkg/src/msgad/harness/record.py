"""Per-run ledgers and their on-disk format.

A run directory holds ``record.csv`` (fixed header, one row per macro step),
``meta.json`` (config echo, seed, model parameters, status) and
``states.npz`` (slow states and extra per-step series, when kept).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

COLUMNS = ("step", "t", "err", "force_evals", "param_M", "param_eps", "se_force")
INT_COLUMNS = {"step", "force_evals", "param_M"}

STATUS_CONVERGED = "converged"
STATUS_MAX_TIME = "max-time"
STATUS_DEGENERATE = "degenerate"
STATUS_DIVERGED = "diverged"


def _version() -> str:
    try:
        from importlib.metadata import version

        return version("artifact")
    except Exception:  # pragma: no cover - not installed
        return "0+unknown"


@dataclass
class RunRecord:
    method: str
    columns: dict = field(default_factory=lambda: {c: [] for c in COLUMNS})
    extras: dict = field(default_factory=dict)
    states: list = field(default_factory=list)
    status: str = STATUS_MAX_TIME
    meta: dict = field(default_factory=dict)
    x_final: np.ndarray | None = None
    x_avg: np.ndarray | None = None

    def append(self, step, t, err=math.nan, force_evals=0, param_M=0, param_eps=math.nan,
               se_force=math.nan, state=None, **extras):
        col = self.columns
        if col["t"] and not t > col["t"][-1]:
            raise ValueError(f"record times must increase strictly (got {t} after {col['t'][-1]})")
        if col["force_evals"] and force_evals < col["force_evals"][-1]:
            raise ValueError("cumulative force evaluations must be non-decreasing")
        col["step"].append(int(step))
        col["t"].append(float(t))
        col["err"].append(float(err))
        col["force_evals"].append(int(force_evals))
        col["param_M"].append(int(param_M))
        col["param_eps"].append(float(param_eps))
        col["se_force"].append(float(se_force))
        for key, value in extras.items():
            self.extras.setdefault(key, []).append(float(value))
        if state is not None:
            self.states.append(np.array(state, dtype=float, copy=True))

    def __len__(self):
        return len(self.columns["step"])

    def array(self, name) -> np.ndarray:
        if name in self.columns:
            return np.asarray(self.columns[name])
        return np.asarray(self.extras[name], dtype=float)

    @property
    def final_error(self) -> float:
        errs = self.columns["err"]
        return errs[-1] if errs else math.nan

    def first_time_below(self, threshold, column="err"):
        """Index of the first row whose ``column`` drops to ``threshold`` or below."""
        values = self.array(column)
        hits = np.flatnonzero(values <= threshold)
        return int(hits[0]) if hits.size else None

    # -- persistence ---------------------------------------------------
    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "record.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(COLUMNS)
            for i in range(len(self)):
                writer.writerow([_fmt(self.columns[c][i]) for c in COLUMNS])
        meta = dict(self.meta)
        meta.update(method=self.method, status=self.status, version=_version(), n_rows=len(self))
        with open(out / "meta.json", "w") as fh:
            json.dump(_jsonable(meta), fh, indent=2, sort_keys=True)
        arrays = {f"extra_{k}": np.asarray(v, dtype=float) for k, v in self.extras.items()}
        if self.states:
            arrays["states"] = np.stack(self.states)
        if self.x_final is not None:
            arrays["x_final"] = np.asarray(self.x_final)
        if self.x_avg is not None:
            arrays["x_avg"] = np.asarray(self.x_avg)
        np.savez(out / "states.npz", **arrays)
        return out

    @classmethod
    def read(cls, out_dir) -> "RunRecord":
        out = Path(out_dir)
        with open(out / "meta.json") as fh:
            meta = json.load(fh)
        rec = cls(method=meta.pop("method"), status=meta.pop("status"))
        meta.pop("version", None)
        meta.pop("n_rows", None)
        rec.meta = meta
        with open(out / "record.csv", newline="") as fh:
            reader = csv.reader(fh)
            header = tuple(next(reader))
            if header != COLUMNS:
                raise ValueError(f"unexpected record header {header}")
            for row in reader:
                for name, text in zip(COLUMNS, row):
                    rec.columns[name].append(int(text) if name in INT_COLUMNS else float(text))
        npz_path = out / "states.npz"
        if npz_path.exists():
            with np.load(npz_path) as data:
                for key in data.files:
                    if key.startswith("extra_"):
                        rec.extras[key[6:]] = data[key].tolist()
                if "states" in data.files:
                    rec.states = list(data["states"])
                if "x_final" in data.files:
                    rec.x_final = data["x_final"]
                if "x_avg" in data.files:
                    rec.x_avg = data["x_avg"]
        return rec


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    return obj
