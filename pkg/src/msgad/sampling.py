"""Micro-solvers for the frozen-x fast process and the averaged estimators.

The fast process at frozen ``x`` is run at unit speed, so a micro step only
needs the ratio ``dt_eff = delta_t / eps``. Estimates of the averaged force
``F``, the mean log-density gradient ``G`` and the Jacobian

    DF = mean(D_x f) + mean(f (x) g) - F (x) G

are sample averages over the retained states. Outer products ``a (x) b`` act as
``v -> a <b, v>`` in the model inner product.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.signal import lfilter

from .model import ModelError, SlowFastModel, UnsupportedOperation

SCHEMES = ("euler-maruyama", "heun", "non-markovian", "implicit")

Y_STREAM, Z_STREAM, SHIFT_STREAM = 0, 1, 2

N_BATCHES = 20

# block sampling is done in chunks to bound memory during long burn-ins
_CHUNK = 50_000


@dataclass
class MicroConfig:
    """Settings of the virtual fast process.

    ``scheme=None`` picks the model's default micro-solver.
    """

    scheme: str | None = None
    dt_eff: float = 0.01
    M: int = 1000
    burn_in: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.scheme is not None and self.scheme not in SCHEMES:
            raise ValueError(f"unknown micro scheme {self.scheme!r}; choose from {', '.join(SCHEMES)}")
        if not self.dt_eff > 0:
            raise ValueError("dt_eff must be positive")
        if self.M < 1:
            raise ValueError("M must be at least 1")
        if self.burn_in < 0:
            raise ValueError("burn_in must be non-negative")

    def scheme_for(self, model) -> str:
        return self.scheme or model.default_scheme


class RandomStream:
    """Counter-based Gaussian stream keyed by ``(seed, stream_id)``.

    Each id gets its own Philox key, so replicas never share draws. The stream
    also holds the look-ahead increment used by the non-Markovian scheme.
    """

    def __init__(self, seed: int = 0, stream_id: int = 0):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,))
        self.gen = np.random.Generator(np.random.Philox(ss))
        self._ahead = None

    def __repr__(self):
        return f"RandomStream(seed={self.seed}, stream_id={self.stream_id})"

    def normal(self, size):
        return self.gen.standard_normal(size)

    def lookahead_pair(self, m):
        """``(eta_n, eta_{n+1})``; ``eta_{n+1}`` is kept for the next call."""
        now = self._take_ahead(m)
        nxt = self.gen.standard_normal(m)
        self._ahead = nxt
        return now, nxt

    def lookahead_block(self, steps, m):
        """``steps + 1`` consecutive increments sharing the cached first row."""
        first = self._take_ahead(m)
        rest = self.gen.standard_normal((steps, m))
        self._ahead = rest[-1].copy()
        return np.concatenate([first[None, :], rest])

    def _take_ahead(self, m):
        if self._ahead is not None and self._ahead.shape == (m,):
            return self._ahead
        return self.gen.standard_normal(m)


def make_streams(seed: int) -> dict:
    """Independent streams for the primary replica, the second replica and shifted x."""
    return {
        "y": RandomStream(seed, Y_STREAM),
        "z": RandomStream(seed, Z_STREAM),
        "shift": RandomStream(seed, SHIFT_STREAM),
    }


# ---------------------------------------------------------------------------
# micro-solvers
# ---------------------------------------------------------------------------


def _check_scheme(model, scheme):
    if scheme in ("heun", "non-markovian") and model.sigma_state_dependent:
        raise UnsupportedOperation(f"{scheme} scheme needs a state-independent noise amplitude")


def micro_step(model: SlowFastModel, x, y, cfg: MicroConfig, stream: RandomStream, h=None):
    """Advance the frozen-x fast process by one step of size ``h`` (default ``cfg.dt_eff``)."""
    h = cfg.dt_eff if h is None else h
    scheme = cfg.scheme_for(model)
    _check_scheme(model, scheme)
    y = np.asarray(y, dtype=float)
    sig = model.sigma(x, y)
    sq = math.sqrt(h)
    if scheme == "non-markovian":
        eta0, eta1 = stream.lookahead_pair(y.size)
        return y + h * model.b(x, y) + sq * sig * 0.5 * (eta0 + eta1)
    xi = stream.normal(y.size)
    if scheme == "euler-maruyama":
        return y + h * model.b(x, y) + sq * sig * xi
    if scheme == "heun":
        drift = model.b(x, y)
        pred = y + h * drift + sq * sig * xi
        return y + 0.5 * h * (drift + model.b(x, pred)) + sq * sig * xi
    # drift-implicit Euler for affine fast drift b = -A y + c
    c = model.b(x, np.zeros_like(y))
    return model.fast_implicit_solve(x, y + h * c + sq * sig * xi, h)


def _modal_recursion(scheme, rates, forcing, h):
    """Coefficients of ``a_next = A a + e0 + noise_coef * s`` for each mode.

    Returns ``(A, e0, noise_coef)``; for the non-Markovian scheme the noise
    term is the average of two consecutive increments.
    """
    hr = h * rates
    if scheme == "euler-maruyama" or scheme == "non-markovian":
        return 1.0 - hr, h * forcing, np.ones_like(hr)
    if scheme == "implicit":
        inv = 1.0 / (1.0 + hr)
        return inv, h * forcing * inv, inv
    if scheme == "heun":
        damp = 1.0 - 0.5 * hr
        return 1.0 - hr + 0.5 * hr**2, h * forcing * damp, damp
    raise ValueError(scheme)


def _block_steps(model, x, lin, scheme, h, stream, y0, steps, keep):
    """Run ``steps`` micro steps of an affine fast process mode by mode."""
    m = y0.size
    A, e0, ncoef = _modal_recursion(scheme, lin.rates, lin.forcing, h)
    a = lin.to_modal(y0)
    out = []
    done = 0
    while done < steps:
        n = min(_CHUNK, steps - done)
        if scheme == "non-markovian":
            eta = stream.lookahead_block(n, m)
            noise = 0.5 * (eta[:-1] + eta[1:])
        else:
            noise = stream.normal((n, m))
        s = lin.to_modal(lin.noise * noise)
        # mode-major layout keeps each filtered series contiguous
        innov = np.ascontiguousarray(s.T)
        innov *= (math.sqrt(h) * ncoef)[:, None]
        innov += e0[:, None]
        for k in range(m):
            innov[k], _ = lfilter([1.0], [1.0, -A[k]], innov[k], zi=[A[k] * a[k]])
        a = innov[:, -1].copy()
        if keep:
            out.append(lin.from_modal(np.ascontiguousarray(innov.T)))
        done += n
    y_final = lin.from_modal(a)
    return (np.concatenate(out) if keep else None), y_final


def _stepwise(model, x, cfg, stream, y, steps, keep):
    out = np.empty((steps, y.size)) if keep else None
    for i in range(steps):
        y = micro_step(model, x, y, cfg, stream)
        if keep:
            out[i] = y
    return out, y


def sample_equilibrium(model: SlowFastModel, x, cfg: MicroConfig, stream: RandomStream, y0=None,
                       block=True):
    """Burn-in then ``cfg.M`` retained fast states at frozen ``x``.

    Affine fast processes are advanced mode by mode with a linear filter
    (``block=True``), which gives the same recursion as repeated micro_step
    calls with the same draws. Returns ``(samples, y_final)``; ``y_final`` is
    the warm start for the next call.
    """
    x = np.asarray(x, dtype=float)
    y = model.default_y0(x) if y0 is None else np.array(y0, dtype=float)
    scheme = cfg.scheme_for(model)
    _check_scheme(model, scheme)
    lin = model.fast_linear(x) if block else None
    if lin is None:
        if cfg.burn_in:
            _, y = _stepwise(model, x, cfg, stream, y, cfg.burn_in, keep=False)
        return _stepwise(model, x, cfg, stream, y, cfg.M, keep=True)
    if cfg.burn_in:
        _, y = _block_steps(model, x, lin, scheme, cfg.dt_eff, stream, y, cfg.burn_in, keep=False)
    return _block_steps(model, x, lin, scheme, cfg.dt_eff, stream, y, cfg.M, keep=True)


# ---------------------------------------------------------------------------
# estimators
# ---------------------------------------------------------------------------


def batch_means_se(values, n_batches=N_BATCHES):
    """Standard error of the mean along axis 0 from contiguous batch means."""
    values = np.asarray(values, dtype=float)
    M = values.shape[0]
    nb = min(n_batches, M)
    if nb < 2:
        return np.full(values.shape[1:], np.nan)
    size = M // nb
    means = values[: nb * size].reshape((nb, size) + values.shape[1:]).mean(axis=1)
    return means.std(axis=0, ddof=1) / math.sqrt(nb)


def _outer_mean(model, a, b):
    """``mean_k a_k (x) b_k`` as a dense matrix in the model inner product."""
    return a.T @ (b * model.weights) / a.shape[0]


def estimate_FG(model: SlowFastModel, x, samples):
    samples = np.asarray(samples)
    if samples.shape[0] == 0:
        raise ModelError("no fast samples supplied")
    return model.f(x, samples).mean(axis=0), model.g(x, samples).mean(axis=0)


def estimate_DF(model: SlowFastModel, x, samples, F_hat, G_hat):
    """Dense ``mean(D_x f + f (x) g) - F_hat (x) G_hat``."""
    samples = np.asarray(samples)
    fs = model.f(x, samples)
    gs = model.g(x, samples)
    return (model.dxf_mean(x, samples) + _outer_mean(model, fs, gs)
            - np.outer(F_hat, G_hat * model.weights))


def estimate_DF_batched(model: SlowFastModel, x, samples, n_batches=N_BATCHES):
    """Full-sample ``DF`` and its batch-means standard error.

    Each batch gets its own ``F``, ``G`` and ``DF`` estimate; the error is the
    spread of the batch ``DF`` values.
    """
    samples = np.asarray(samples)
    F, G = estimate_FG(model, x, samples)
    DF = estimate_DF(model, x, samples, F, G)
    nb = min(n_batches, samples.shape[0])
    size = samples.shape[0] // nb
    per = []
    for i in range(nb):
        chunk = samples[i * size:(i + 1) * size]
        Fb, Gb = estimate_FG(model, x, chunk)
        per.append(estimate_DF(model, x, chunk, Fb, Gb))
    se = np.std(per, axis=0, ddof=1) / math.sqrt(nb)
    return DF, se


@dataclass
class EffectiveEstimates:
    """Sample averages at one slow state plus matrix-free Jacobian actions."""

    F_hat: np.ndarray
    G_hat: np.ndarray
    M_used: int
    se_F: np.ndarray | None = None
    f_centered: np.ndarray | None = field(default=None, repr=False)
    g_centered: np.ndarray | None = field(default=None, repr=False)
    dxf_mv: Callable | None = field(default=None, repr=False)
    dxf_rmv: Callable | None = field(default=None, repr=False)
    dxf_dense: Callable | None = field(default=None, repr=False)
    weights: np.ndarray | None = field(default=None, repr=False)

    def jvp(self, v):
        cov = self.f_centered.T @ (self.g_centered @ (self.weights * v)) / self.M_used
        return self.dxf_mv(v) + cov

    def vjp(self, w):
        cov = self.g_centered.T @ (self.f_centered @ (self.weights * w)) / self.M_used
        return self.dxf_rmv(w) + cov

    @property
    def DF_hat(self) -> np.ndarray:
        cov = self.f_centered.T @ (self.g_centered * self.weights) / self.M_used
        return self.dxf_dense() + cov

    @property
    def asymmetry(self) -> float:
        """``|DF_hat - DF_hat^T|`` in the Frobenius norm (tracked for gradient models)."""
        D = self.DF_hat
        return float(np.linalg.norm(D - D.T))


def estimate_effective(model: SlowFastModel, x, samples, with_se=True) -> EffectiveEstimates:
    """Evaluate ``f`` and ``g`` once per sample and bundle all estimates."""
    samples = np.asarray(samples)
    if samples.shape[0] == 0:
        raise ModelError("no fast samples supplied")
    fs = model.f(x, samples)
    gs = model.g(x, samples)
    F = fs.mean(axis=0)
    G = gs.mean(axis=0)
    return EffectiveEstimates(
        F_hat=F,
        G_hat=G,
        M_used=samples.shape[0],
        se_F=batch_means_se(fs) if with_se else None,
        f_centered=fs - F,
        g_centered=gs - G,
        dxf_mv=lambda v: model.dxf_mean_matvec(x, samples, v),
        dxf_rmv=lambda w: model.dxf_mean_rmatvec(x, samples, w),
        dxf_dense=lambda: model.dxf_mean(x, samples),
        weights=model.weights,
    )


def covariance_two_stream(model: SlowFastModel, x, y_samples, z_samples, variant="C2",
                          return_se=False):
    """Covariance term of ``DF`` from two independent replicas.

    ``C2``: mean of ``(f(y) - f(z)) (x) g(y)``.
    ``half-hatC2``: half the mean of ``(f(y) - f(z)) (x) (g(y) - g(z))``.
    """
    y_samples = np.asarray(y_samples)
    z_samples = np.asarray(z_samples)
    if y_samples.shape != z_samples.shape:
        raise ModelError(f"replica sample shapes differ: {y_samples.shape} vs {z_samples.shape}")
    df = model.f(x, y_samples) - model.f(x, z_samples)
    gy = model.g(x, y_samples)
    if variant == "C2":
        right = gy
        scale = 1.0
    elif variant == "half-hatC2":
        right = gy - model.g(x, z_samples)
        scale = 0.5
    else:
        raise ValueError(f"unknown covariance variant {variant!r}")
    C = scale * _outer_mean(model, df, right)
    if not return_se:
        return C
    per_sample = scale * df[:, :, None] * (right * model.weights)[:, None, :]
    return C, batch_means_se(per_sample)


def instantaneous_cov_matvec(model, x, y, z, v):
    """Single-sample ``C2`` action ``(f(y) - f(z)) <g(y), v>``; ``y``, ``z`` may be batches."""
    return (model.f(x, y) - model.f(x, z)) * np.asarray(model.inner(model.g(x, y), v))[..., None]


def instantaneous_cov_rmatvec(model, x, y, z, w):
    """Single-sample adjoint covariance action ``(g(y) - g(z)) <f(y), w>``.

    Its mean is the adjoint of the mean of :func:`instantaneous_cov_matvec`.
    """
    return (model.g(x, y) - model.g(x, z)) * np.asarray(model.inner(model.f(x, y), w))[..., None]


def jacobian_vector_fd(model: SlowFastModel, x, v, h, cfg: MicroConfig, streams=None,
                       y0=None, coupled=False, split=False, return_se=False):
    """Finite-difference ``DF(x) v`` from fast samples at ``x`` and ``x + h v``.

    By default the two replicas use independent streams. ``coupled=True``
    reuses the same draws at both points, which removes most of the Monte Carlo
    noise from the difference. ``split=True`` uses the analytic ``D_x f v``
    and differences only the densities: ``f(x, .)`` averaged under both laws.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    if not np.any(v):
        out = np.zeros_like(x)
        return (out, out.copy()) if return_se else out
    streams = streams or make_streams(cfg.seed)
    if coupled:
        s0 = RandomStream(cfg.seed, Y_STREAM)
        s1 = RandomStream(cfg.seed, Y_STREAM)
    else:
        s0, s1 = streams["y"], streams["shift"]
    xh = x + h * v
    y_base, _ = sample_equilibrium(model, x, cfg, s0, y0)
    y_shift, _ = sample_equilibrium(model, xh, cfg, s1, y0)
    f0 = model.f(x, y_base)
    if split:
        f1 = model.f(x, y_shift)
        lead = model.dxf_mean_matvec(x, y_base, v)
    else:
        f1 = model.f(xh, y_shift)
        lead = 0.0
    diff = (f1.mean(axis=0) - f0.mean(axis=0)) / h
    out = lead + diff
    if not return_se:
        return out
    if coupled:
        se = batch_means_se((f1 - f0) / h)
    else:
        se = np.sqrt(batch_means_se(f1) ** 2 + batch_means_se(f0) ** 2) / h
    return out, se
