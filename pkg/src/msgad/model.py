"""Slow-fast model systems.

A model couples a slow variable ``x`` (dimension ``n``) with a fast variable
``y`` (dimension ``m``)::

    dx/dt = f(x, y)
    dy/dt = b(x, y) / eps + sigma(x, y) / sqrt(eps) * white noise

All evaluation methods broadcast over leading axes of ``y`` so that a block of
``M`` fast samples with shape ``(M, m)`` produces ``(M, n)`` outputs.

``g(x, y)`` is the Riesz representer, in the model inner product, of the
x-gradient of ``log rho(x, y)`` with the ``log Z(x)`` contribution left out.
For Euclidean models this is plain ``-grad_x U``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.fft
from scipy.integrate import trapezoid
from scipy.linalg import solve_banded


class ModelError(ValueError):
    """Contract violation when calling a model (shapes, unsupported ops)."""


class UnsupportedOperation(ModelError):
    pass


class SlowFastModel:
    """Base class. Subclasses fill in the drift, diffusion and gradient hooks."""

    name = "abstract"
    n: int
    m: int
    is_gradient = False
    sigma_state_dependent = False
    # models with a stiff linear slow part set this and implement solve_stiff
    has_stiff_part = False
    # micro-solver used when the configuration does not name one
    default_scheme = "euler-maruyama"

    # -- inner product -------------------------------------------------
    @property
    def weights(self) -> np.ndarray:
        return np.ones(self.n)

    def inner(self, a, b):
        return np.sum(np.asarray(a) * np.asarray(b) * self.weights, axis=-1)

    def norm(self, a):
        return np.sqrt(self.inner(a, a))

    # -- required hooks ------------------------------------------------
    def f(self, x, y):
        raise NotImplementedError

    def b(self, x, y):
        raise NotImplementedError

    def sigma(self, x, y=None):
        """Diagonal noise amplitudes of the fast equation, shape ``(m,)``."""
        raise NotImplementedError

    def g(self, x, y):
        raise NotImplementedError

    def dxf(self, x, y):
        """Dense ``n x n`` Jacobian of ``f`` in ``x`` for a single fast state."""
        raise NotImplementedError

    # -- Jacobian actions (override for large n) -----------------------
    def dxf_matvec(self, x, y, v):
        """``D_x f(x, y) v`` for each fast sample in ``y``."""
        return np.einsum("...ij,j->...i", self.dxf(x, y), v)

    def dxf_rmatvec(self, x, y, w):
        """Adjoint action of ``D_x f`` in the model inner product."""
        return np.einsum("...ij,i->...j", self.dxf(x, y), w)

    def dxf_mean(self, x, ys):
        return np.mean(self.dxf(x, ys), axis=0)

    def dxf_mean_matvec(self, x, ys, v):
        return np.mean(self.dxf_matvec(x, ys, v), axis=0)

    def dxf_mean_rmatvec(self, x, ys, w):
        return np.mean(self.dxf_rmatvec(x, ys, w), axis=0)

    # -- optional closed forms -----------------------------------------
    def exact_F(self, x):
        raise UnsupportedOperation(f"model {self.name!r} has no closed-form effective force")

    def exact_DF(self, x):
        raise UnsupportedOperation(f"model {self.name!r} has no closed-form effective Jacobian")

    def exact_DF_matvec(self, x, v):
        return self.exact_DF(x) @ v

    def exact_DF_rmatvec(self, x, w):
        return self.exact_DF(x).T @ w

    def exact_W(self, x):
        raise UnsupportedOperation(f"model {self.name!r} has no closed-form effective potential")

    @property
    def has_exact(self) -> bool:
        try:
            self.exact_F(self.default_x0())
        except UnsupportedOperation:
            return False
        return True

    # -- linear fast structure (for implicit and block micro-solvers) ---
    def fast_linear(self, x) -> "LinearFast | None":
        """Return the modal structure of ``b`` if it is affine in ``y``."""
        return None

    def fast_implicit_solve(self, x, rhs, h):
        """Solve ``(I + h A_x) y = rhs`` where ``b(x, y) = -A_x y + c(x)``."""
        raise UnsupportedOperation(f"model {self.name!r} has no implicit fast solver")

    def stiff_apply(self, x):
        raise UnsupportedOperation("model has no stiff slow part")

    def solve_stiff(self, rhs, dt):
        raise UnsupportedOperation("model has no stiff slow part")

    # -- defaults for drivers ------------------------------------------
    def default_x0(self):
        return np.zeros(self.n)

    def default_y0(self, x):
        return np.zeros(self.m)

    def params(self) -> dict:
        return {}

    def check_dims(self, x, y=None):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n,):
            raise ModelError(f"slow state has shape {x.shape}, expected ({self.n},)")
        if y is not None:
            y = np.asarray(y, dtype=float)
            if y.shape[-1:] != (self.m,):
                raise ModelError(f"fast state has trailing shape {y.shape[-1:]}, expected ({self.m},)")
        return x, y


@dataclass
class LinearFast:
    """Fast drift ``b(x, y) = -A y + c`` diagonalised by a fixed transform.

    ``to_modal``/``from_modal`` act on the last axis. ``rates`` are the modal
    eigenvalues of ``A``; ``forcing`` is ``c`` in modal coordinates; ``noise``
    holds the nodal diagonal noise amplitudes.
    """

    rates: np.ndarray
    forcing: np.ndarray
    noise: np.ndarray
    to_modal: object = None
    from_modal: object = None

    def __post_init__(self):
        if self.to_modal is None:
            self.to_modal = _identity
        if self.from_modal is None:
            self.from_modal = _identity


def _identity(a):
    return a


def eval_slow_drift(model: SlowFastModel, x, y):
    x, y = model.check_dims(x, y)
    return model.f(x, y)


def eval_g(model: SlowFastModel, x, y):
    x, y = model.check_dims(x, y)
    return model.g(x, y)


def exact_effective_force(model: SlowFastModel, x):
    x, _ = model.check_dims(x)
    return model.exact_F(x)


# ---------------------------------------------------------------------------
# Two-dimensional example with Ornstein-Uhlenbeck fast variables
# ---------------------------------------------------------------------------

TWOD_D = np.array([[0.8, -0.2], [-0.2, 0.5]])

# published critical points of the averaged 2D system
TWOD_MINIMA = {
    "m1": np.array([0.4643, 0.6985]),
    "m2": np.array([2.2038, 5.9804]),
    "m3": np.array([5.7109, 6.2369]),
}
TWOD_SADDLES = {
    "s1": np.array([1.2841, 3.4483]),
    "s2": np.array([3.5689, 6.0735]),
}


class TwoDimOUModel(SlowFastModel):
    """``dx_i = -(D x)_i + y_i^2``, ``dy_i = -y_i / Gamma_i(x) + sigma dW``.

    ``Gamma_i(x) = 1 / (1 + (x_i - center)^2)``. The fast law at frozen x is
    the product of ``N(0, sigma2 Gamma_i / 2)``.
    """

    name = "twod-ou"
    n = 2
    m = 2
    # exact stationary variance for OU fast variables at any step size
    default_scheme = "non-markovian"

    def __init__(self, D=None, sigma2: float = 10.0, center: float = 5.0):
        self.D = np.array(TWOD_D if D is None else D, dtype=float).reshape(2, 2)
        if not np.allclose(self.D, self.D.T):
            raise ModelError("D must be symmetric")
        if sigma2 <= 0:
            raise ModelError("sigma2 must be positive")
        self.sigma2 = float(sigma2)
        self.center = float(center)

    def params(self):
        return {"D": self.D.tolist(), "sigma2": self.sigma2, "center": self.center}

    def gamma(self, x):
        return 1.0 / (1.0 + (np.asarray(x) - self.center) ** 2)

    def f(self, x, y):
        return -(self.D @ x) + np.asarray(y) ** 2

    def b(self, x, y):
        return -np.asarray(y) / self.gamma(x)

    def sigma(self, x, y=None):
        return np.full(self.m, np.sqrt(self.sigma2))

    def g(self, x, y):
        # U = (2/sigma2) sum y_i^2 / (2 Gamma_i(x))
        return -2.0 * (x - self.center) * np.asarray(y) ** 2 / self.sigma2

    def dxf(self, x, y):
        y = np.asarray(y)
        return np.broadcast_to(-self.D, y.shape[:-1] + (2, 2))

    def dxf_matvec(self, x, y, v):
        y = np.asarray(y)
        return np.broadcast_to(-(self.D @ v), y.shape)

    def dxf_rmatvec(self, x, y, w):
        y = np.asarray(y)
        return np.broadcast_to(-(self.D.T @ w), y.shape)

    def dxf_mean_matvec(self, x, ys, v):
        return -(self.D @ v)

    def dxf_mean_rmatvec(self, x, ys, w):
        return -(self.D.T @ w)

    def exact_F(self, x):
        return -(self.D @ x) + 0.5 * self.sigma2 * self.gamma(x)

    def exact_DF(self, x):
        gam = self.gamma(x)
        return -self.D + np.diag(-self.sigma2 * (x - self.center) * gam**2)

    def exact_W(self, x):
        x = np.asarray(x, dtype=float)
        R = np.sum(np.arctan(x - self.center), axis=-1)
        return 0.5 * np.einsum("...i,ij,...j->...", x, self.D, x) - 0.5 * self.sigma2 * R

    def fast_linear(self, x):
        return LinearFast(
            rates=1.0 / self.gamma(x),
            forcing=np.zeros(self.m),
            noise=self.sigma(x),
        )

    def fast_implicit_solve(self, x, rhs, h):
        return rhs / (1.0 + h / self.gamma(x))

    def default_x0(self):
        return TWOD_MINIMA["m1"].copy()


# ---------------------------------------------------------------------------
# Coupled Allen-Cahn system on [0, 1] with Neumann boundaries
# ---------------------------------------------------------------------------


def neumann_laplacian(u, dx):
    """Second-order Laplacian with mirrored ghost nodes, along the last axis."""
    u = np.asarray(u, dtype=float)
    out = np.empty_like(u)
    out[..., 1:-1] = u[..., 2:] - 2.0 * u[..., 1:-1] + u[..., :-2]
    out[..., 0] = 2.0 * (u[..., 1] - u[..., 0])
    out[..., -1] = 2.0 * (u[..., -2] - u[..., -1])
    return out / dx**2


def trapezoid_weights(N, dx):
    w = np.full(N, dx)
    w[0] = w[-1] = 0.5 * dx
    return w


def _dct1_from_modal(a):
    return scipy.fft.dct(a, type=1, axis=-1)


def _dct1_to_modal(u):
    return scipy.fft.idct(u, type=1, axis=-1)


class CoupledAllenCahnModel(SlowFastModel):
    """Slow Allen-Cahn field ``u`` driven by a fast Gaussian field ``phi``.

    ``u_t = kappa^2 u_xx + u - u^3 + mu phi``,
    ``phi_t = (phi_xx - phi + mu u) / eps + sigma / sqrt(eps) dW``.

    Both fields live on ``N`` nodes of [0, 1] with trapezoidal L2 weights; the
    Laplacian uses mirrored ghost nodes and is self-adjoint in that product.
    """

    name = "allen-cahn"
    is_gradient = True
    has_stiff_part = True
    # the fast Laplacian is far too stiff for explicit steps at useful step sizes
    default_scheme = "implicit"

    def __init__(self, kappa: float = 0.01, mu: float = 1.0, sigma: float = 0.3, grid_n: int = 201):
        if grid_n < 3:
            raise ModelError("grid_n must be at least 3")
        self.kappa = float(kappa)
        self.mu = float(mu)
        self.sig = float(sigma)
        self.N = int(grid_n)
        self.n = self.m = self.N
        self.dx = 1.0 / (self.N - 1)
        self.grid = np.linspace(0.0, 1.0, self.N)
        self._w = trapezoid_weights(self.N, self.dx)
        k = np.arange(self.N)
        # eigenvalues of -laplacian, diagonalised by DCT-I
        self.lap_eigs = (2.0 / self.dx**2) * (1.0 - np.cos(np.pi * k / (self.N - 1)))
        self._helmholtz_ab = self._banded(1.0, 1.0)
        self._stiff_cache: dict = {}
        self._fast_cache: dict = {}

    def params(self):
        return {"kappa": self.kappa, "mu": self.mu, "sigma": self.sig, "grid_n": self.N}

    @property
    def weights(self):
        return self._w

    def laplacian(self, u):
        return neumann_laplacian(u, self.dx)

    def _banded(self, diag_coef, lap_coef):
        """Banded storage of ``diag_coef * I - lap_coef * Laplacian``."""
        N, r = self.N, lap_coef / self.dx**2
        ab = np.zeros((3, N))
        ab[1, :] = diag_coef + 2.0 * r
        ab[0, 1:] = -r
        ab[2, :-1] = -r
        ab[0, 1] = -2.0 * r  # row 0 couples to node 1 with factor 2
        ab[2, N - 2] = -2.0 * r  # row N-1 couples to node N-2 with factor 2
        return ab

    def helmholtz_apply(self, w):
        return w - self.laplacian(w)

    def solve_helmholtz(self, rhs):
        rhs = np.asarray(rhs, dtype=float)
        if rhs.shape[-1] != self.N:
            raise ModelError(f"grid function has {rhs.shape[-1]} nodes, expected {self.N}")
        return solve_banded((1, 1), self._helmholtz_ab, rhs.T, check_finite=False).T

    # -- model hooks ---------------------------------------------------
    def reaction(self, u):
        return u * (1.0 - u * u)

    def f(self, x, y):
        return self.kappa**2 * self.laplacian(x) + self.reaction(x) + self.mu * np.asarray(y)

    def b(self, x, y):
        y = np.asarray(y)
        return self.laplacian(y) - y + self.mu * x

    def sigma(self, x, y=None):
        # spatio-temporal white noise: unit covariance in the weighted product
        return self.sig / np.sqrt(self._w)

    def g(self, x, y):
        return (2.0 / self.sig**2) * self.f(x, y)

    def dxf(self, x, y=None):
        L = np.diag(-2.0 * np.ones(self.N)) + np.diag(np.ones(self.N - 1), 1) + np.diag(np.ones(self.N - 1), -1)
        L[0, 1] = 2.0
        L[-1, -2] = 2.0
        return self.kappa**2 * L / self.dx**2 + np.diag(1.0 - 3.0 * x**2)

    def dxf_mean(self, x, ys=None):
        return self.dxf(x)

    def _hess_apply(self, x, v):
        return self.kappa**2 * self.laplacian(v) + (1.0 - 3.0 * x**2) * v

    def dxf_matvec(self, x, y, v):
        y = np.asarray(y)
        return np.broadcast_to(self._hess_apply(x, v), y.shape)

    dxf_rmatvec = dxf_matvec

    def dxf_mean_matvec(self, x, ys, v):
        return self._hess_apply(x, v)

    dxf_mean_rmatvec = dxf_mean_matvec

    def exact_F(self, x):
        return self.kappa**2 * self.laplacian(x) + self.reaction(x) + self.mu**2 * self.solve_helmholtz(x)

    def exact_DF_matvec(self, x, v):
        return self._hess_apply(x, v) + self.mu**2 * self.solve_helmholtz(v)

    exact_DF_rmatvec = exact_DF_matvec

    def exact_DF(self, x):
        # solve_helmholtz works row-wise, so the transpose gives the inverse matrix
        return self.dxf(x) + self.mu**2 * self.solve_helmholtz(np.eye(self.N)).T

    def exact_W(self, x):
        x = np.asarray(x, dtype=float)
        grad = np.sum(np.diff(x, axis=-1) ** 2, axis=-1) / (2.0 * self.dx)
        local = np.sum(self._w * 0.25 * (x**2 - 1.0) ** 2, axis=-1)
        coupling = 0.5 * self.mu**2 * self.inner(x, self.solve_helmholtz(x))
        return self.kappa**2 * grad + local - coupling

    def energy(self, u, phi):
        """Joint energy ``U(u, phi)``, discretised consistently with the Laplacian."""
        u = np.asarray(u, dtype=float)
        phi = np.asarray(phi, dtype=float)
        grad_u = np.sum(np.diff(u, axis=-1) ** 2, axis=-1) / (2.0 * self.dx)
        grad_p = np.sum(np.diff(phi, axis=-1) ** 2, axis=-1) / (2.0 * self.dx)
        local = np.sum(self._w * (0.25 * (u**2 - 1.0) ** 2 - self.mu * u * phi + 0.5 * phi**2), axis=-1)
        return self.kappa**2 * grad_u + local + grad_p

    # -- fast structure ------------------------------------------------
    def fast_linear(self, x):
        return LinearFast(
            rates=1.0 + self.lap_eigs,
            forcing=_dct1_to_modal(self.mu * np.asarray(x)),
            noise=self.sigma(x),
            to_modal=_dct1_to_modal,
            from_modal=_dct1_from_modal,
        )

    def fast_implicit_solve(self, x, rhs, h):
        ab = self._fast_cache.get(h)
        if ab is None:
            ab = self._banded(1.0 + h, h)
            self._fast_cache = {h: ab}
        return solve_banded((1, 1), ab, np.asarray(rhs).T, check_finite=False).T

    def stiff_apply(self, x):
        return self.kappa**2 * self.laplacian(x)

    def solve_stiff(self, rhs, dt):
        ab = self._stiff_cache.get(dt)
        if ab is None:
            ab = self._banded(1.0, dt * self.kappa**2)
            if len(self._stiff_cache) > 8:
                self._stiff_cache.clear()
            self._stiff_cache[dt] = ab
        return solve_banded((1, 1), ab, rhs, check_finite=False)

    def default_x0(self):
        return np.cos(np.pi * self.grid)

    def default_y0(self, x):
        return self.mu * self.solve_helmholtz(np.asarray(x, dtype=float))


# ---------------------------------------------------------------------------
# Extended-Lagrangian family
# ---------------------------------------------------------------------------


_QUAD_GRID = np.linspace(-8.0, 8.0, 8001)


def _double_well_V(y):
    return 0.25 * (y**2 - 1.0) ** 2


def _double_well_dV(y):
    return y**3 - y


@dataclass
class ExtendedLagrangianModel(SlowFastModel):
    """Extended potential ``U(x, y) = V(y) + kappa/2 |x - q(y)|^2``.

    Slow drift ``-kappa (x - q(y))``, fast drift ``-grad V + kappa Dq^T (x - q)``.
    The defaults use independent double wells ``V(y) = sum (y_i^2 - 1)^2 / 4``
    with ``q(y) = y``, so ``n = m`` and the averaged system is gradient.
    """

    kappa_couple: float = 10.0
    sig: float = 0.5
    dim: int = 1
    V: object = None
    dV: object = None
    q: object = None
    Dq: object = None
    name: str = field(default="ext-lagrangian", init=False)

    is_gradient = True

    def __post_init__(self):
        self.n = self.m = int(self.dim)
        # closed forms below assume the built-in separable wells and q(y) = y
        self._separable = self.V is None and self.q is None
        if self.V is None:
            self.V, self.dV = _double_well_V, _double_well_dV
        if self.q is None:
            self.q = lambda y: np.asarray(y)
            self.Dq = None  # identity

    def params(self):
        return {"kappa": self.kappa_couple, "sigma": self.sig, "dim": self.n}

    def _qT(self, y, r):
        if self.Dq is None:
            return r
        return np.einsum("...ij,...i->...j", self.Dq(y), r)

    def f(self, x, y):
        return -self.kappa_couple * (x - self.q(y))

    def b(self, x, y):
        y = np.asarray(y)
        return -(self.dV(y) - self.kappa_couple * self._qT(y, x - self.q(y)))

    def sigma(self, x, y=None):
        return np.full(self.m, self.sig)

    def g(self, x, y):
        return -(2.0 / self.sig**2) * self.kappa_couple * (x - self.q(y))

    def dxf(self, x, y):
        y = np.asarray(y)
        return np.broadcast_to(-self.kappa_couple * np.eye(self.n), y.shape[:-1] + (self.n, self.n))

    def dxf_mean_matvec(self, x, ys, v):
        return -self.kappa_couple * np.asarray(v)

    def dxf_mean_rmatvec(self, x, ys, w):
        return -self.kappa_couple * np.asarray(w)

    def _frozen_moments(self, x):
        """Per-coordinate mean, variance and log partition function at frozen x."""
        if not self._separable:
            raise UnsupportedOperation("closed forms need the built-in wells with q(y) = y")
        x = np.asarray(x, dtype=float)
        ys = _QUAD_GRID
        U = (2.0 / self.sig**2) * (_double_well_V(ys) + 0.5 * self.kappa_couple * (x[..., None] - ys) ** 2)
        shift = U.min(axis=-1, keepdims=True)
        p = np.exp(-(U - shift))
        Z = trapezoid(p, ys, axis=-1)
        mean = trapezoid(p * ys, ys, axis=-1) / Z
        var = trapezoid(p * (ys - mean[..., None]) ** 2, ys, axis=-1) / Z
        return mean, var, np.log(Z) - shift[..., 0]

    def exact_F(self, x):
        mean, _, _ = self._frozen_moments(x)
        return -self.kappa_couple * (np.asarray(x) - mean)

    def exact_DF(self, x):
        _, var, _ = self._frozen_moments(x)
        k = self.kappa_couple
        return np.diag(-k + 2.0 * k**2 * var / self.sig**2)

    def exact_DF_matvec(self, x, v):
        return np.diag(self.exact_DF(x)) * v

    exact_DF_rmatvec = exact_DF_matvec

    def exact_W(self, x):
        _, _, logZ = self._frozen_moments(x)
        return -0.5 * self.sig**2 * np.sum(logZ, axis=-1)

    def default_x0(self):
        return np.full(self.n, -1.0)

    def default_y0(self, x):
        return np.asarray(x, dtype=float).copy()


MODEL_NAMES = ("twod-ou", "allen-cahn", "ext-lagrangian")


def make_model(name: str, params: dict | None = None) -> SlowFastModel:
    """Build a built-in model from its CLI name and ``model.*`` overrides."""
    params = dict(params or {})
    if name == "twod-ou":
        allowed = {"D", "sigma2", "center"}
        _check_params(name, params, allowed)
        D = params.get("D")
        if D is not None:
            D = np.asarray(D, dtype=float)
            if D.size == 4:
                D = D.reshape(2, 2)
            elif D.size == 3:  # d11, d12, d22
                D = np.array([[D[0], D[1]], [D[1], D[2]]])
        return TwoDimOUModel(D=D, sigma2=float(params.get("sigma2", 10.0)),
                             center=float(params.get("center", 5.0)))
    if name == "allen-cahn":
        _check_params(name, params, {"kappa", "mu", "sigma", "grid_n"})
        return CoupledAllenCahnModel(
            kappa=float(params.get("kappa", 0.01)),
            mu=float(params.get("mu", 1.0)),
            sigma=float(params.get("sigma", 0.3)),
            grid_n=int(params.get("grid_n", 201)),
        )
    if name == "ext-lagrangian":
        _check_params(name, params, {"kappa", "sigma", "grid_n"})
        return ExtendedLagrangianModel(
            kappa_couple=float(params.get("kappa", 10.0)),
            sig=float(params.get("sigma", 0.5)),
            dim=int(params.get("grid_n", 1)),
        )
    raise ModelError(f"unknown model {name!r}; choose from {', '.join(MODEL_NAMES)}")


def _check_params(name, params, allowed):
    extra = set(params) - allowed
    if extra:
        raise ModelError(f"model {name!r} does not accept parameter(s): {', '.join(sorted('model.' + e for e in extra))}")
