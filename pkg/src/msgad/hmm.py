"""Heterogeneous multiscale driver for multiscale GAD.

One macro step at ``x_n``:

1. sample the frozen-x fast process, warm-started from the previous burst;
2. estimate ``F``, ``G`` and the Jacobian actions from the samples;
3. take ``K`` direction steps with the estimated Jacobian;
4. move ``x`` along the GAD-modified force estimate.

The step order matches :func:`msgad.gad.gad_run`, so for a model whose slow
drift ignores ``y`` both drivers produce the same trajectory.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .gad import (
    DIVERGENCE_NORM,
    MacroState,
    initial_directions,
    macro_update,
    modified_force,
    update_directions,
)
from .harness.record import STATUS_CONVERGED, STATUS_DIVERGED, RunRecord
from .sampling import MicroConfig, estimate_effective, make_streams, sample_equilibrium
from .scm import RunningAverage

log = logging.getLogger(__name__)

STOP_WINDOW = 10


@dataclass
class MSchedule:
    """Sample-size growth ``M(t) = ceil(M0 max(1, t / t_on)^r)``.

    ``t_on=None`` starts the growth when the force estimate is first dominated
    by its own standard error. ``M_max`` caps the growth (default ``100 M0``).
    """

    r: float = 1.0
    t_on: float | None = None
    M_max: int | None = None

    def __post_init__(self):
        if self.r < 0:
            raise ValueError("schedule exponent r must be non-negative")
        if self.t_on is not None and self.t_on <= 0:
            raise ValueError("t_on must be positive")

    def M_at(self, M0, t, t_on):
        if t_on is None:
            return M0
        M = math.ceil(M0 * max(1.0, t / t_on) ** self.r)
        return min(M, self.M_max or 100 * M0)


@dataclass
class HmmConfig:
    dt: float = 0.01
    dtau: float | None = None
    gamma: float = 1.0
    K: int = 1
    micro: MicroConfig = field(default_factory=MicroConfig)
    M_schedule: MSchedule | None = None
    avg_burn_in: float | None = None
    tol: float | None = None
    max_time: float = 100.0
    stop_err: float | None = None
    cold_burn_in: int | None = None
    kick: float = 1e-2
    keep_states: bool = True

    def __post_init__(self):
        if self.dtau is None:
            self.dtau = self.dt
        if min(self.dt, self.dtau, self.gamma, self.max_time) <= 0:
            raise ValueError("dt, dtau, gamma and max_time must be positive")
        if self.kick < 0:
            raise ValueError("kick must be non-negative")
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if self.cold_burn_in is None:
            self.cold_burn_in = 10 * self.micro.M


def direction_cost(K, gradient):
    """Jacobian applications charged per macro step."""
    return K * (1 if gradient else 2)


def hmm_step(model, s: MacroState, cfg: HmmConfig, warm, streams, M=None, burn_in=None):
    """One four-stage macro step. Returns ``(s_next, warm_next, est, resets)``."""
    micro = dataclasses.replace(
        cfg.micro,
        M=cfg.micro.M if M is None else M,
        burn_in=cfg.micro.burn_in if burn_in is None else burn_in,
    )
    samples, warm = sample_equilibrium(model, s.x, micro, streams["y"], warm)
    est = estimate_effective(model, s.x, samples)
    dirs, resets = update_directions(est.jvp, est.vjp, s.dirs, cfg.dtau, cfg.K, cfg.gamma,
                                     model.inner, model.is_gradient)
    stiff = model.has_stiff_part
    x_next = macro_update(s.x, est.F_hat, dirs, cfg.dt, model.inner,
                          model.stiff_apply if stiff else None, model.solve_stiff if stiff else None)
    return MacroState(x_next, dirs, s.t + cfg.dt), warm, est, resets


def hmm_run(model, x0=None, v0=None, w0=None, cfg: HmmConfig | None = None, streams=None,
            reference=None, seed=None):
    """Iterate :func:`hmm_step` until a stop rule fires.

    Stop rules, checked in order: the error against ``reference`` reaches
    ``cfg.stop_err``; the modified force estimate stays below
    ``max(tol, 3 se)`` for ten consecutive steps (after the averaging burn-in
    when averaging); ``t`` reaches ``cfg.max_time``. A non-finite or huge slow
    state ends the run as diverged. The start is displaced by ``cfg.kick``
    along ``v0`` as in :func:`msgad.gad.gad_run`. Returns the time average
    as ``x*`` when averaging is on, the last state otherwise.
    """
    cfg = cfg or HmmConfig()
    seed = cfg.micro.seed if seed is None else seed
    streams = streams or make_streams(seed)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(99,)))
    x = np.array(model.default_x0() if x0 is None else x0, dtype=float)
    model.check_dims(x)
    dirs = initial_directions(x.size, rng, v0, w0, model.inner, model.is_gradient)
    s = MacroState(x + cfg.kick * dirs.v, dirs, 0.0)
    error = reference.error if reference is not None else None
    avg = RunningAverage(t0=cfg.avg_burn_in) if cfg.avg_burn_in is not None else None
    sched = cfg.M_schedule
    t_on = sched.t_on if sched else None

    rec = RunRecord(method="hmm")
    rec.meta.update(config=_config_echo(cfg), seed=seed, model=model.name, model_params=model.params())
    dir_cost = direction_cost(cfg.K, model.is_gradient)
    evals = 0
    resets = 0
    window = deque(maxlen=STOP_WINDOW)
    warm = None
    n_steps = int(round(cfg.max_time / cfg.dt))
    step = 0
    while True:
        M = sched.M_at(cfg.micro.M, s.t, t_on) if sched else cfg.micro.M
        burn = cfg.cold_burn_in if step == 0 else None
        s_next, warm, est, r = hmm_step(model, s, cfg, warm, streams, M=M, burn_in=burn)
        resets += r
        evals += 2 * M + dir_cost
        mod = modified_force(est.F_hat, s_next.dirs, model.inner)
        mod_norm = float(model.norm(mod))
        se = float(model.norm(est.se_F))
        if sched and t_on is None and s.t > 0 and se > mod_norm:
            t_on = s.t
            log.info("sample-size growth starts at t = %.4g", t_on)
        if avg is not None:
            avg.update(s.x, s.t)
        x_out = avg.value() if avg is not None and avg.available else s.x
        err = error(x_out) if error else math.nan
        extras = {"mod_force": mod_norm}
        if error:
            extras["err_raw"] = error(s.x)
        rec.append(step, s.t, err=err, force_evals=evals, param_M=M, se_force=se,
                   state=s.x if cfg.keep_states else None, **extras)

        window.append(mod_norm <= max(cfg.tol or 0.0, 3.0 * se))
        averaged_enough = avg is None or (avg.available and avg.span > 0)
        if cfg.stop_err is not None and error and err <= cfg.stop_err:
            rec.status = STATUS_CONVERGED
            break
        if (cfg.tol is not None and averaged_enough and len(window) == STOP_WINDOW
                and all(window)):
            rec.status = STATUS_CONVERGED
            break
        if step >= n_steps:
            break
        finite = np.all(np.isfinite(s_next.x)) and np.all(np.isfinite(est.F_hat))
        if not (finite and model.norm(s_next.x) < DIVERGENCE_NORM):
            rec.status = STATUS_DIVERGED
            log.warning("slow state left every bounded region at t = %.4g", s_next.t)
            break
        s = s_next
        step += 1

    rec.x_final = s.x
    if avg is not None and avg.available:
        rec.x_avg = avg.value()
    x_star = rec.x_avg if rec.x_avg is not None else s.x
    rec.meta.update(degenerate_resets=resets, t_on=t_on, v_final=s.dirs.v, steps=step,
                    final_mod_force=mod_norm)
    return x_star, rec


def _config_echo(cfg):
    return dataclasses.asdict(cfg)
