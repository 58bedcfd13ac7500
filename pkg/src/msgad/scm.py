"""Seamless coupling: slow, boosted fast and direction variables on one clock.

Each step advances the slow state with the instantaneous force ``f(x, y)``,
two independent fast replicas ``y`` and ``z`` at the boosted scale ``eps'``,
and the directions with the single-sample Jacobian

    D_x f(x, y) + (f(x, y) - f(x, z)) (x) g(x, y)

whose covariance part averages to the covariance term of ``DF``. The left
direction uses ``D_x f^* w + (g(y) - g(z)) <f(y), w>``, which averages to the
adjoint of the same term.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .gad import DIVERGENCE_NORM, DirectionPair, initial_directions, macro_update, modified_force, update_directions
from .harness.record import STATUS_CONVERGED, STATUS_DIVERGED, RunRecord
from .sampling import MicroConfig, make_streams, micro_step

log = logging.getLogger(__name__)

COV_VARIANTS = ("C2", "half-hatC2")

# default (dt0, eps_prime0) per model. The PDE steps its fast replicas
# implicitly; the 2D fast rates reach 1 + 25 on [0, 8]^2, so dt0 / eps_prime0
# = 0.05 keeps the explicit fast steps stable there.
SCM_DEFAULTS = {
    "allen-cahn": (1e-2, 1e-3),
    "twod-ou": (5e-5, 1e-3),
    "ext-lagrangian": (5e-5, 1e-3),
}


class NotYetAvailable(RuntimeError):
    """The time average was queried before any sample past the burn-in."""


@dataclass
class RunningAverage:
    """Trapezoidal time average ``(t - t0)^-1 int_{t0}^{t} x(s) ds``.

    Samples before ``t0`` are only kept to interpolate the value at ``t0``. If
    the first sample arrives after ``t0`` with nothing before it, the average
    starts at that sample.
    """

    t0: float = 0.0
    integral: np.ndarray | None = None
    t_start: float | None = None
    t_last: float | None = None
    x_last: np.ndarray | None = field(default=None, repr=False)

    def update(self, x, t):
        x = np.array(x, dtype=float, copy=True)
        t = float(t)
        if self.t_last is not None and not t > self.t_last:
            raise ValueError("running average times must increase")
        if t < self.t0:
            self.t_last, self.x_last = t, x
            return self
        if self.integral is None:
            if self.t_last is not None and t > self.t0:
                # linear interpolation to the burn-in time
                lam = (self.t0 - self.t_last) / (t - self.t_last)
                x0 = self.x_last + lam * (x - self.x_last)
                self.t_start = self.t0
                self.integral = 0.5 * (t - self.t0) * (x0 + x)
            else:
                self.t_start = t
                self.integral = np.zeros_like(x)
        else:
            self.integral = self.integral + 0.5 * (t - self.t_last) * (self.x_last + x)
        self.t_last, self.x_last = t, x
        return self

    @property
    def available(self) -> bool:
        return self.integral is not None

    @property
    def span(self) -> float:
        return 0.0 if self.integral is None else self.t_last - self.t_start

    def value(self):
        if self.integral is None:
            raise NotYetAvailable(f"no sample at or after t0 = {self.t0}")
        if self.span == 0.0:
            return self.x_last.copy()
        return self.integral / self.span


def running_average(acc: RunningAverage | None, x_new, t_new, t0) -> RunningAverage:
    """Functional form of :meth:`RunningAverage.update`."""
    acc = RunningAverage(t0=t0) if acc is None else acc
    return acc.update(x_new, t_new)


@dataclass
class ScmConfig:
    """Seamless-coupling settings.

    ``dt0``/``eps_prime0`` default per model. With ``adaptive`` the decay
    ``dt_k = dt0 k^-p_dt``, ``eps_k = eps_prime0 k^-p_eps`` starts when the
    error reaches ``trigger_err``, at ``trigger_time``, or when the running
    mean of the modified force norm drops to ``trigger_force``, whichever
    criterion is configured and fires first.
    """

    dt0: float | None = None
    eps_prime0: float | None = None
    adaptive: bool = False
    trigger_err: float | None = None
    trigger_time: float | None = None
    trigger_force: float | None = None
    p_dt: float = 0.5
    p_eps: float = 0.5
    avg_burn_in: float | None = None
    max_time: float = 100.0
    stop_err: float | None = None
    cov_variant: str = "C2"
    gamma: float = 1.0
    K: int = 1
    scheme: str | None = None
    fast_burn_in: int = 100
    switch_to_hmm: bool = False
    switch_eps: float | None = None
    hmm: object = None
    kick: float = 1e-2
    record_every: int = 1
    keep_states: bool = True
    max_steps: int | None = None

    def __post_init__(self):
        if self.cov_variant not in COV_VARIANTS:
            raise ValueError(f"unknown covariance variant {self.cov_variant!r}")
        for name in ("dt0", "eps_prime0"):
            val = getattr(self, name)
            if val is not None and not val > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.p_eps <= self.p_dt:
            raise ValueError("decay exponents must satisfy 0 <= p_eps <= p_dt")
        if self.K < 1 or self.record_every < 1:
            raise ValueError("K and record_every must be at least 1")
        if self.max_time <= 0 or self.gamma <= 0:
            raise ValueError("max_time and gamma must be positive")

    def resolved(self, model) -> "ScmConfig":
        dt0, eps0 = SCM_DEFAULTS.get(model.name, (5e-5, 1e-3))
        return dataclasses.replace(
            self,
            dt0=self.dt0 if self.dt0 is not None else dt0,
            eps_prime0=self.eps_prime0 if self.eps_prime0 is not None else eps0,
        )


@dataclass
class ScmState:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    dirs: DirectionPair
    t: float = 0.0
    k: int = 0
    avg: RunningAverage | None = None


def decay_schedule(cfg: ScmConfig, k):
    """``(dt0 k^-p_dt, eps_prime0 k^-p_eps)`` for ``k >= 1``."""
    if k < 1:
        raise ValueError("decay index k starts at 1")
    return cfg.dt0 * k ** (-cfg.p_dt), cfg.eps_prime0 * k ** (-cfg.p_eps)


def _direction_ops(model, x, y, z, variant):
    """Single-sample Jacobian actions for the two direction equations."""
    fy = model.f(x, y)
    fz = model.f(x, z)
    gy = model.g(x, y)
    df = fy - fz
    inner = model.inner
    if variant == "C2":
        gz = model.g(x, z)

        def jvp(v):
            return model.dxf_matvec(x, y, v) + df * inner(gy, v)

        def vjp(w):
            return model.dxf_rmatvec(x, y, w) + (gy - gz) * inner(fy, w)
    else:
        dg = gy - model.g(x, z)

        def jvp(v):
            return model.dxf_matvec(x, y, v) + 0.5 * df * inner(dg, v)

        def vjp(w):
            return model.dxf_rmatvec(x, y, w) + 0.5 * dg * inner(df, w)

    return fy, jvp, vjp


def scm_step(model, s: ScmState, cfg: ScmConfig, streams, dt=None, eps=None):
    """Advance every component by one common step.

    Directions are updated first with the Jacobian sampled at ``(x, y, z)``,
    then ``x`` moves along the modified instantaneous force, then both fast
    replicas take one step of size ``dt / eps`` at the old ``x``.
    Returns ``(s_next, resets)``.
    """
    dt = cfg.dt0 if dt is None else dt
    eps = cfg.eps_prime0 if eps is None else eps
    fy, jvp, vjp = _direction_ops(model, s.x, s.y, s.z, cfg.cov_variant)
    dirs, resets = update_directions(jvp, vjp, s.dirs, dt, cfg.K, cfg.gamma, model.inner,
                                     model.is_gradient)
    stiff = model.has_stiff_part
    x_next = macro_update(s.x, fy, dirs, dt, model.inner,
                          model.stiff_apply if stiff else None, model.solve_stiff if stiff else None)
    micro = MicroConfig(scheme=cfg.scheme, dt_eff=dt / eps, M=1)
    y_next = micro_step(model, s.x, s.y, micro, streams["y"])
    z_next = micro_step(model, s.x, s.z, micro, streams["z"])
    return ScmState(x_next, y_next, z_next, dirs, s.t + dt, s.k, s.avg), resets


def scm_run(model, x0=None, v0=None, w0=None, cfg: ScmConfig | None = None, streams=None,
            reference=None, seed=0):
    """Integrate :func:`scm_step` and return the time-averaged output.

    The ledger records the reported state (time average once available), the
    current ``eps'`` and the cumulative force count. With ``switch_to_hmm``
    the run hands over to :func:`msgad.hmm.hmm_run` once ``eps'`` has decayed
    to ``switch_eps``.
    """
    cfg = (cfg or ScmConfig()).resolved(model)
    streams = streams or make_streams(seed)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(99,)))
    x = np.array(model.default_x0() if x0 is None else x0, dtype=float)
    model.check_dims(x)
    dirs = initial_directions(x.size, rng, v0, w0, model.inner, model.is_gradient)
    x = x + cfg.kick * dirs.v
    y = model.default_y0(x)
    z = model.default_y0(x)
    micro = MicroConfig(scheme=cfg.scheme, dt_eff=cfg.dt0 / cfg.eps_prime0, M=1)
    for _ in range(cfg.fast_burn_in):
        y = micro_step(model, x, y, micro, streams["y"])
        z = micro_step(model, x, z, micro, streams["z"])
    avg = RunningAverage(t0=cfg.avg_burn_in) if cfg.avg_burn_in is not None else None
    s = ScmState(x, y, z, dirs, 0.0, 0, avg)
    error = reference.error if reference is not None else None

    rec = RunRecord(method="scm")
    rec.meta.update(config=_echo(cfg), seed=seed, model=model.name, model_params=model.params())
    dir_cost = cfg.K * (1 if model.is_gradient else 2)
    force_window = deque(maxlen=100)
    evals = 0
    resets = 0
    step = 0
    t_trigger = None
    switch_eps = cfg.switch_eps if cfg.switch_eps is not None else cfg.eps_prime0 / 100
    switched = False
    while True:
        dt, eps = decay_schedule(cfg, s.k) if s.k >= 1 else (cfg.dt0, cfg.eps_prime0)
        if s.avg is not None:
            s.avg.update(s.x, s.t)
        s_next, r = scm_step(model, s, cfg, streams, dt, eps)
        resets += r
        evals += 3 + dir_cost
        x_out = s.avg.value() if s.avg is not None and s.avg.available else s.x
        err = error(x_out) if error else math.nan
        recording = step % cfg.record_every == 0 or s.t + dt >= cfg.max_time
        if recording or cfg.trigger_force is not None:
            mod_norm = float(model.norm(modified_force(model.f(s.x, s.y), s_next.dirs, model.inner)))
            force_window.append(mod_norm)
        if recording:
            extras = {"mod_force": mod_norm, "dt": dt}
            if error:
                extras["err_raw"] = error(s.x)
            rec.append(step, s.t, err=err, force_evals=evals, param_eps=eps,
                       state=s.x if cfg.keep_states else None, **extras)
        if cfg.stop_err is not None and error and err <= cfg.stop_err:
            rec.status = STATUS_CONVERGED
            break
        if cfg.adaptive and s.k == 0 and _triggered(cfg, err, s.t, force_window):
            t_trigger = s.t
            s_next.k = 1
            log.info("eps' decay starts at t = %.4g", t_trigger)
        if s.k >= 1:
            s_next.k = s.k + 1
        if s_next.t > cfg.max_time or (cfg.max_steps and step + 1 >= cfg.max_steps):
            s = s_next
            break
        finite = all(np.all(np.isfinite(a)) for a in (s_next.x, s_next.y, s_next.z))
        if not (finite and model.norm(s_next.x) < DIVERGENCE_NORM):
            rec.status = STATUS_DIVERGED
            log.warning("slow state left every bounded region at t = %.4g", s_next.t)
            break
        s = s_next
        step += 1
        if cfg.switch_to_hmm and s.k >= 1 and eps <= switch_eps:
            switched = True
            break

    rec.meta.update(degenerate_resets=resets, t_trigger=t_trigger, steps=step,
                    v_final=s.dirs.v, switched_to_hmm=switched)
    if switched:
        return _continue_with_hmm(model, s, cfg, rec, evals, reference, seed)
    rec.x_final = s.x
    if s.avg is not None and s.avg.available:
        rec.x_avg = s.avg.value()
    x_star = rec.x_avg if rec.x_avg is not None else s.x
    return x_star, rec


def _triggered(cfg, err, t, force_window):
    if cfg.trigger_err is not None and not math.isnan(err) and err <= cfg.trigger_err:
        return True
    if cfg.trigger_time is not None and t >= cfg.trigger_time:
        return True
    if (cfg.trigger_force is not None and len(force_window) == force_window.maxlen
            and np.mean(force_window) <= cfg.trigger_force):
        return True
    return False


def _continue_with_hmm(model, s, cfg, rec, evals, reference, seed):
    """Finish the run with the HMM from the current SCM state."""
    from .hmm import HmmConfig, hmm_run

    base = cfg.hmm if cfg.hmm is not None else HmmConfig()
    remaining = cfg.max_time - s.t
    hcfg = dataclasses.replace(base, max_time=max(remaining, base.dt), kick=0.0,
                               avg_burn_in=None if base.avg_burn_in is None else 0.0,
                               stop_err=cfg.stop_err if base.stop_err is None else base.stop_err)
    log.info("switching to the HMM at t = %.4g", s.t)
    x_star, hrec = hmm_run(model, s.x, s.dirs.v, s.dirs.w, hcfg, reference=reference, seed=seed)
    t_offset = s.t
    last_step = rec.columns["step"][-1] if len(rec) else -1
    for i in range(len(hrec)):
        t = hrec.columns["t"][i] + t_offset
        if len(rec) and t <= rec.columns["t"][-1]:
            continue
        rec.append(last_step + 1 + i, t, err=hrec.columns["err"][i],
                   force_evals=evals + hrec.columns["force_evals"][i],
                   param_M=hrec.columns["param_M"][i], se_force=hrec.columns["se_force"][i],
                   state=hrec.states[i] if hrec.states else None, dt=hcfg.dt,
                   **{k: v[i] for k, v in hrec.extras.items() if k in rec.extras})
    rec.status = hrec.status
    rec.x_final = hrec.x_final
    rec.x_avg = hrec.x_avg
    rec.meta.update(t_switch=t_offset, hmm_meta=hrec.meta)
    return x_star, rec


def _echo(cfg):
    out = dataclasses.asdict(cfg) if cfg.hmm is None else {**dataclasses.asdict(dataclasses.replace(cfg, hmm=None)),
                                                           "hmm": dataclasses.asdict(cfg.hmm)}
    return out
