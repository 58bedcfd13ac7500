"""Reference saddles from the closed-form averaged flow, and the error metric."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..gad import Flow, GadConfig, gad_run
from ..model import ModelError, UnsupportedOperation, make_model, trapezoid_weights

REFERENCE_TOL = 1e-10


class ReferenceNotConverged(RuntimeError):
    pass


@dataclass
class ReferenceSaddle:
    """A saddle of the averaged flow with its generation residual.

    ``grid`` is set for grid-function models; the error is then the
    trapezoidal L2 norm on that grid.
    """

    model: str
    params: dict
    x: np.ndarray
    residual: float
    tol: float
    grid: np.ndarray | None = None
    v: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        if self.grid is not None:
            self.grid = np.asarray(self.grid, dtype=float)
            if self.grid.shape != self.x.shape:
                raise ModelError("reference grid and profile lengths differ")

    @property
    def weights(self):
        if self.grid is None:
            return np.ones(self.x.size)
        return trapezoid_weights(self.grid.size, self.grid[1] - self.grid[0])

    def error(self, x) -> float:
        return error_metric(x, self)

    def on_grid(self, grid) -> "ReferenceSaddle":
        """Linear interpolation of a profile reference onto another uniform grid."""
        if self.grid is None:
            raise ModelError("only grid-function references can be interpolated")
        grid = np.asarray(grid, dtype=float)
        u = np.interp(grid, self.grid, self.x)
        meta = dict(self.meta, interpolated_from=int(self.grid.size))
        return ReferenceSaddle(self.model, dict(self.params, grid_n=int(grid.size)), u,
                               self.residual, self.tol, grid, None, meta)

    # -- persistence ---------------------------------------------------
    def save(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        info = {
            "model": self.model,
            "params": self.params,
            "residual": self.residual,
            "tol": self.tol,
            "meta": self.meta,
        }
        if self.grid is None:
            info["x"] = self.x.tolist()
        else:
            with open(out / "reference.csv", "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["x", "u_star"])
                for xi, ui in zip(self.grid, self.x):
                    writer.writerow([repr(float(xi)), repr(float(ui))])
        if self.v is not None:
            info["v"] = self.v.tolist()
        with open(out / "reference.json", "w") as fh:
            json.dump(info, fh, indent=2)
        return out

    @classmethod
    def load(cls, path) -> "ReferenceSaddle":
        path = Path(path)
        folder = path if path.is_dir() else path.parent
        with open(folder / "reference.json") as fh:
            info = json.load(fh)
        grid = None
        if "x" in info:
            x = np.asarray(info["x"])
        else:
            data = np.loadtxt(folder / "reference.csv", delimiter=",", skiprows=1, ndmin=2)
            grid, x = data[:, 0], data[:, 1]
        v = np.asarray(info["v"]) if "v" in info else None
        return cls(info["model"], info["params"], x, info["residual"], info["tol"], grid, v,
                   info.get("meta", {}))

    def build_model(self):
        return make_model(self.model, self.params)


def error_metric(x, ref: ReferenceSaddle) -> float:
    """Euclidean distance, or trapezoidal L2 distance for grid functions."""
    x = np.asarray(x, dtype=float)
    if x.shape != ref.x.shape:
        raise ModelError(f"state shape {x.shape} does not match reference shape {ref.x.shape}")
    d = x - ref.x
    return math.sqrt(float(np.sum(ref.weights * d * d)))


def default_reference_config(model) -> GadConfig:
    return GadConfig(dt=0.01, tol=REFERENCE_TOL, max_steps=400_000, kick=1e-2, keep_states=False)


def make_reference(model, x0=None, v0=None, cfg: GadConfig | None = None, seed=0,
                   w0=None) -> ReferenceSaddle:
    """Deterministic GAD on the closed-form averaged flow.

    The run is repeated from its end point with a tighter stopping level until
    the plain force residual also meets the tolerance.
    """
    if not model.has_exact:
        raise UnsupportedOperation(f"model {model.name!r} has no closed-form effective force")
    cfg = cfg or default_reference_config(model)
    if cfg.tol > REFERENCE_TOL:
        raise ValueError(f"reference tolerance must be at most {REFERENCE_TOL}")
    flow = Flow.from_model(model)
    x0 = model.default_x0() if x0 is None else np.asarray(x0, dtype=float)
    if v0 is None:
        v0 = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(99,))).standard_normal(x0.size)
    x, rec = gad_run(flow, x0, v0, w0, cfg)
    tol = cfg.tol
    steps = len(rec)
    residual = float(model.norm(model.exact_F(x)))
    for _ in range(5):
        if rec.status != "converged" or residual <= cfg.tol:
            break
        tol /= 4
        tighter = GadConfig(**{**vars(cfg), "tol": tol, "kick": 0.0})
        x, rec = gad_run(flow, x, rec.meta["v_final"], None, tighter)
        steps += len(rec)
        residual = float(model.norm(model.exact_F(x)))
    if rec.status != "converged" or residual > cfg.tol:
        raise ReferenceNotConverged(
            f"GAD did not reach residual {cfg.tol:g} (status {rec.status}, residual {residual:.3e})")
    grid = getattr(model, "grid", None)
    return ReferenceSaddle(
        model=model.name,
        params=model.params(),
        x=x,
        residual=residual,
        tol=cfg.tol,
        grid=None if grid is None else grid.copy(),
        v=np.asarray(rec.meta["v_final"]),
        meta={"steps": steps, "dt": cfg.dt, "x0": np.asarray(x0).tolist() if x0.size <= 16 else "profile"},
    )
