"""Deterministic gentlest ascent dynamics (GAD).

The extended flow for ``dx/dt = phi(x)`` is::

    x' = phi - 2 <phi, w> / <w, v> v
    gamma v' = Dphi v - alpha v
    gamma w' = Dphi^* w - beta w

with the normalisation ``<v, v> = <w, v> = 1``. Gradient flows only need ``v``.
Inner products and adjoints are taken in the model's inner product.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .harness.record import STATUS_CONVERGED, STATUS_DIVERGED, STATUS_MAX_TIME, RunRecord

log = logging.getLogger(__name__)

DEGENERATE_TOL = 1e-10
# slow states beyond this norm are treated as escaped to infinity
DIVERGENCE_NORM = 1e4


class DegeneratePairError(ArithmeticError):
    """Raised when ``<w, v>`` vanishes and the oblique projection is undefined."""


def euclidean_inner(a, b):
    return np.sum(np.asarray(a) * np.asarray(b), axis=-1)


@dataclass
class DirectionPair:
    v: np.ndarray
    w: np.ndarray

    def copy(self):
        return DirectionPair(self.v.copy(), self.w.copy())


@dataclass
class MacroState:
    x: np.ndarray
    dirs: DirectionPair
    t: float = 0.0


@dataclass
class GadConfig:
    dt: float = 0.01
    dtau: float | None = None
    gamma: float = 1.0
    K: int = 1
    tol: float = 1e-6
    max_steps: int = 200_000
    fd_h: float = 1e-3
    kick: float = 1e-2
    keep_states: bool = True

    def __post_init__(self):
        if self.dtau is None:
            self.dtau = self.dt
        if min(self.dt, self.dtau, self.gamma, self.fd_h) <= 0:
            raise ValueError("dt, dtau, gamma and fd_h must be positive")
        if self.kick < 0:
            raise ValueError("kick must be non-negative")
        if self.K < 1:
            raise ValueError("K must be at least 1")


@dataclass
class Flow:
    """A deterministic flow with its Jacobian actions.

    ``vjp`` is the adjoint action in ``inner``. A flow with a stiff linear part
    provides ``stiff_apply`` and ``solve_stiff(rhs, dt)`` and is advanced by
    convex splitting.
    """

    phi: Callable
    jvp: Callable
    vjp: Callable | None = None
    inner: Callable = euclidean_inner
    is_gradient: bool = False
    stiff_apply: Callable | None = None
    solve_stiff: Callable | None = None
    error: Callable | None = None

    @classmethod
    def from_model(cls, model, reference=None):
        """Closed-form averaged flow of a model."""
        stiff = model.has_stiff_part
        return cls(
            phi=model.exact_F,
            jvp=model.exact_DF_matvec,
            vjp=model.exact_DF_rmatvec,
            inner=model.inner,
            is_gradient=model.is_gradient,
            stiff_apply=model.stiff_apply if stiff else None,
            solve_stiff=model.solve_stiff if stiff else None,
            error=None if reference is None else reference.error,
        )


def lagrange_multipliers(Av, v, w, inner=euclidean_inner):
    """Multipliers keeping ``<v, v> = <w, v> = 1`` under the direction flow."""
    alpha = inner(v, Av)
    beta = 2.0 * inner(w, Av) - alpha
    return alpha, beta


def modified_force(F, dirs: DirectionPair, inner=euclidean_inner):
    """``F - 2 <F, w> / <w, v> v``: the force reversed along ``v``."""
    wv = inner(dirs.w, dirs.v)
    if abs(wv) < DEGENERATE_TOL:
        raise DegeneratePairError(f"<w, v> = {wv:.3e}")
    return F - 2.0 * inner(F, dirs.w) / wv * dirs.v


def gad_vector_field(flow, jvp, jtvp, s: MacroState, gamma=1.0, inner=euclidean_inner):
    phi = flow(s.x)
    v, w = s.dirs.v, s.dirs.w
    Av = jvp(s.x, v)
    Atw = jtvp(s.x, w)
    alpha, beta = lagrange_multipliers(Av, v, w, inner)
    xdot = modified_force(phi, s.dirs, inner)
    vdot = (Av - alpha * v) / gamma
    wdot = (Atw - beta * w) / gamma
    return xdot, vdot, wdot


def gad_gradient_field(grad, hvp, x, v, gamma=1.0, inner=euclidean_inner):
    gV = grad(x)
    Hv = hvp(x, v)
    xdot = -gV + 2.0 * inner(gV, v) / inner(v, v) * v
    vdot = (-Hv + inner(v, Hv) * v) / gamma
    return xdot, vdot


def hvp_finite_difference(grad, x, v, h):
    """One-sided dimer estimate of the Hessian-vector product."""
    if h <= 0:
        raise ValueError("h must be positive")
    return (grad(x + h * v) - grad(x)) / h


def normalize_pair(v, w=None, inner=euclidean_inner, gradient=False):
    """Return ``(v / |v|, w / <v, w>)``; resets ``w := v`` on a degenerate pair.

    The second return value flags whether a reset happened.
    """
    v = v / math.sqrt(inner(v, v))
    if gradient or w is None:
        return DirectionPair(v, v), False
    vw = inner(v, w)
    if abs(vw) < DEGENERATE_TOL:
        log.warning("degenerate direction pair (<v, w> = %.3e); resetting w := v", vw)
        return DirectionPair(v, v.copy()), True
    return DirectionPair(v, w / vw), False


def update_directions(jvp, vjp, dirs: DirectionPair, dtau, K=1, gamma=1.0,
                      inner=euclidean_inner, gradient=False):
    """K explicit direction steps, each followed by renormalisation.

    ``v_hat = v + dtau/gamma Jv``, ``v = v_hat / |v_hat|``;
    ``w_hat = w + dtau/gamma J^*w``, ``w = w_hat / <v, w_hat>``.
    The multiplier terms only rescale and are absorbed by the normalisation.
    Returns the new pair and the number of degenerate resets.
    """
    h = dtau / gamma
    resets = 0
    for _ in range(K):
        v_hat = dirs.v + h * jvp(dirs.v)
        if gradient:
            dirs, _ = normalize_pair(v_hat, inner=inner, gradient=True)
            continue
        w_hat = dirs.w + h * vjp(dirs.w)
        dirs, reset = normalize_pair(v_hat, w_hat, inner)
        resets += reset
    return dirs, resets


def convex_splitting_step(model, u, nonstiff_force, dt):
    """Implicit stiff diffusion, explicit everything else.

    Solves ``(I - dt L) u_next = u + dt * nonstiff_force`` where ``L`` is the
    model's stiff linear operator (``kappa^2`` times the Laplacian).
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    return model.solve_stiff(u + dt * nonstiff_force, dt)


def macro_update(x, F, dirs, dt, inner, stiff_apply=None, solve_stiff=None):
    """One macro step of ``x`` along the GAD-modified force ``F``."""
    mod = modified_force(F, dirs, inner)
    if solve_stiff is None:
        return x + dt * mod
    return solve_stiff(x + dt * (mod - stiff_apply(x)), dt)


def initial_directions(n, rng=None, v0=None, w0=None, inner=euclidean_inner, gradient=False):
    """Normalised starting pair; random from ``rng`` when not supplied."""
    if v0 is None:
        rng = rng if rng is not None else np.random.default_rng(0)
        v0 = rng.standard_normal(n)
    v0 = np.asarray(v0, dtype=float)
    w0 = v0.copy() if w0 is None else np.asarray(w0, dtype=float)
    if not gradient and abs(inner(v0, w0)) < DEGENERATE_TOL:
        raise DegeneratePairError("initial directions satisfy <v0, w0> = 0")
    return normalize_pair(v0, w0, inner, gradient)[0]


def gad_run(flow: Flow, x0, v0, w0=None, cfg: GadConfig | None = None):
    """Forward-Euler GAD (convex splitting when the flow has a stiff part).

    The start is displaced by ``cfg.kick`` along the normalised ``v0``; from a
    minimum the force vanishes and the sign of ``v0`` then picks the side to climb.
    Stops when the norm of the modified force drops to ``cfg.tol`` or after
    ``cfg.max_steps``; a state that leaves every bounded region ends the run
    as diverged. Returns the final state and the full ledger.
    """
    cfg = cfg or GadConfig()
    inner = flow.inner
    vjp = flow.vjp or flow.jvp
    x = np.array(x0, dtype=float)
    dirs = initial_directions(x.size, v0=v0, w0=w0, inner=inner, gradient=flow.is_gradient)
    x = x + cfg.kick * dirs.v
    rec = RunRecord(method="gad")
    rec.meta.update(config=vars(cfg).copy())
    dir_cost = cfg.K * (1 if flow.is_gradient else 2)
    evals = 0
    t = 0.0
    resets = 0
    for step in range(cfg.max_steps + 1):
        F = flow.phi(x)
        dirs, r = update_directions(lambda v: flow.jvp(x, v), lambda w: vjp(x, w), dirs,
                                    cfg.dtau, cfg.K, cfg.gamma, inner, flow.is_gradient)
        resets += r
        evals += 1 + dir_cost
        residual = math.sqrt(inner(F, F))
        mod = modified_force(F, dirs, inner)
        mod_norm = math.sqrt(inner(mod, mod))
        err = flow.error(x) if flow.error else math.nan
        rec.append(step, t, err=err, force_evals=evals,
                   state=x if cfg.keep_states else None, residual=residual, mod_force=mod_norm)
        if mod_norm <= cfg.tol:
            rec.status = STATUS_CONVERGED
            break
        if step == cfg.max_steps:
            break
        x_next = macro_update(x, F, dirs, cfg.dt, inner, flow.stiff_apply, flow.solve_stiff)
        if not (np.all(np.isfinite(x_next)) and math.sqrt(inner(x_next, x_next)) < DIVERGENCE_NORM):
            rec.status = STATUS_DIVERGED
            log.warning("slow state left every bounded region at t = %.4g", t)
            break
        x = x_next
        t += cfg.dt
    rec.x_final = x
    rec.meta.update(degenerate_resets=resets, final_residual=residual, final_mod_force=mod_norm,
                    v_final=dirs.v, steps=step)
    return x, rec
