"""Diagnostic tables: estimator variance along a segment and error-vs-cost curves."""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from ..sampling import MicroConfig, RandomStream, batch_means_se, sample_equilibrium

DEFAULT_SEGMENT = ((1.2841, 3.0), (1.2841, 6.0))


def _var_with_se(values):
    """Sample variance along axis 0 and its batch-means standard error."""
    dev2 = (values - values.mean(axis=0)) ** 2
    return dev2.mean(axis=0), batch_means_se(dev2)


def variance_scan(model, segment=DEFAULT_SEGMENT, n_points=31, M=100_000, seed=0,
                  micro: MicroConfig | None = None) -> dict:
    """Per-sample variances of the force and Jacobian estimators along a segment.

    At each point ``x`` the frozen fast process supplies ``M`` samples; the
    table holds ``Var(f_i)`` and ``Var((D_x f + C)_ij)`` where the per-sample
    covariance term is ``(f_i - F_i)(g_j - G_j) w_j``, each with a batch-means
    standard error. Columns are named ``var_f{i}``, ``var_J{i}{j}`` and
    ``se_`` counterparts (1-based indices).
    """
    a, b = (np.asarray(p, dtype=float) for p in segment)
    if a.shape != b.shape or a.size != model.n:
        raise ValueError("segment end points must be slow states of the model")
    micro = micro or MicroConfig(M=M, burn_in=max(1000, M // 100), seed=seed)
    stream = RandomStream(seed, 0)
    n = model.n
    table: dict = {f"x{i + 1}": [] for i in range(n)}
    for s in np.linspace(0.0, 1.0, n_points):
        x = a + s * (b - a)
        ys, _ = sample_equilibrium(model, x, micro, stream)
        fs = model.f(x, ys)
        gs = model.g(x, ys)
        fc = fs - fs.mean(axis=0)
        gc = (gs - gs.mean(axis=0)) * model.weights
        J = model.dxf(x, ys) + fc[:, :, None] * gc[:, None, :]
        var_f, se_f = _var_with_se(fs)
        var_J, se_J = _var_with_se(J.reshape(J.shape[0], -1))
        for i in range(n):
            table[f"x{i + 1}"].append(float(x[i]))
        _put(table, "var_f", var_f, n)
        _put(table, "se_f", se_f, n)
        _put(table, "var_J", var_J.reshape(n, n), n)
        _put(table, "se_J", se_J.reshape(n, n), n)
    return {k: np.asarray(v) for k, v in table.items()}


def _put(table, prefix, values, n):
    if values.ndim == 1:
        for i in range(n):
            table.setdefault(f"{prefix}{i + 1}", []).append(float(values[i]))
    else:
        for i in range(n):
            for j in range(n):
                table.setdefault(f"{prefix}{i + 1}{j + 1}", []).append(float(values[i, j]))


def evals_to_reach(record, threshold, column="err"):
    """Cumulative force evaluations at the first row with ``column <= threshold``."""
    values = record.array(column)
    hits = np.flatnonzero(values <= threshold)
    if hits.size == 0:
        return math.inf
    return int(record.array("force_evals")[hits[0]])


def cost_report(records) -> dict:
    """Error against cumulative force evaluations, one column pair per run.

    ``records`` maps a label to a :class:`RunRecord` (a sequence is labelled
    by method and position). Shorter curves are padded with NaN so that every
    column has the same length.
    """
    if not isinstance(records, dict):
        records = {f"{rec.method}{i}": rec for i, rec in enumerate(records)}
    if not records:
        return {}
    length = max(len(rec) for rec in records.values())
    table = {}
    for label, rec in records.items():
        for col, name in (("force_evals", "evals"), ("err", "err")):
            out = np.full(length, np.nan)
            out[: len(rec)] = rec.array(col)
            table[f"{label}_{name}"] = out
    return table


def write_table(table: dict, path) -> Path:
    """Write a column table as CSV with ``repr`` floats."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(table)
    rows = zip(*(table[k] for k in names)) if names else []
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(names)
        for row in rows:
            writer.writerow([repr(float(v)) for v in row])
    return path
