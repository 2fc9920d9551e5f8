"""Stationary covariance kernels, their spectral measures and mollifications.

Every kernel is an immutable dataclass. Kernels are called on displacement
vectors of shape ``(..., d)`` and return arrays of shape ``(...)``. The
Fourier convention is ``F(phi)(xi) = int exp(i xi.x) phi(x) dx``, so a kernel
with spectral measure ``mu`` is ``gamma(x) = int exp(i xi.x) mu(dxi)`` and
mollification ``gamma_eps = gamma * p_eps`` damps ``mu`` by
``exp(-eps |xi|^2 / 2)``.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import integrate, interpolate, optimize, special

from .errors import QuadratureError, Unsupported

__all__ = [
    "StationaryKernel",
    "Riesz",
    "LogPlus",
    "TruncPower",
    "Bessel",
    "CosineAtoms",
    "Scaled",
    "Mollified",
    "CovarianceKernel",
    "SpectralDensity",
    "DalangResult",
    "GramCheck",
    "constant_kernel",
    "eval_gamma",
    "eval_k",
    "mollify",
    "dalang_check",
    "gram_psd_check",
    "bessel_G",
    "bessel_G_radial",
    "riesz_domination_constant",
    "covariance_domination_constant",
    "condition_H_report",
    "sphere_area",
    "kernel_to_dict",
    "kernel_from_dict",
    "format_kernel",
    "parse_kernel",
]

# Mollified tables: relative quadrature tolerance and evaluation cap.
MOLLIFY_EPSREL = 1e-8
MOLLIFY_MAX_EVALS = 10**6
_NODES_PER_WIDTH = 80
_GAUSS_TAIL = 12.0  # table extends this many sqrt(eps) past the support


def sphere_area(d):
    """Surface area of the unit sphere in R^d."""
    return 2.0 * math.pi ** (d / 2) / math.gamma(d / 2)


def _as_points(x, d):
    x = np.asarray(x, dtype=float)
    if d == 1 and x.ndim == 0:
        x = x[None]
    if x.shape[-1] != d:
        raise ValueError(f"expected trailing dimension {d}, got shape {x.shape}")
    return x


@dataclass(frozen=True)
class SpectralDensity:
    """Radial spectral density ``w`` with ``mu(dxi) = w(|xi|) dxi``.

    ``tail_exponent`` is ``tau`` in ``w(rho) ~ rho**-tau`` as rho grows
    (``inf`` for Gaussian-damped densities, ``None`` when unknown).
    """

    dim: int
    density: Callable[[np.ndarray], np.ndarray]
    tail_exponent: Optional[float]

    def __call__(self, rho):
        return self.density(np.asarray(rho, dtype=float))

    def radial_integral(self, weight):
        """``int_{R^d} weight(|xi|) w(|xi|) dxi`` by radial quadrature."""
        d = self.dim

        def f(rho):
            return float(weight(rho) * self.density(np.asarray(rho)) * rho ** (d - 1))

        lo, _ = integrate.quad(f, 0.0, 1.0, limit=400, epsrel=1e-10)
        hi, _ = integrate.quad(f, 1.0, np.inf, limit=400, epsrel=1e-10)
        return sphere_area(d) * (lo + hi)


class StationaryKernel:
    """Base class: a positive definite function ``gamma`` on R^d."""

    dim: int

    def __call__(self, x):
        raise NotImplementedError

    def pairwise(self, a, b):
        """Matrix ``gamma(a_i - b_j)`` for point sets of shape ``(..., n, d)``, ``(..., m, d)``."""
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        return self(a[..., :, None, :] - b[..., None, :, :])

    @property
    def singular(self):
        return False

    def spectral_density(self):
        return None

    def value_at_zero(self):
        return float(self(np.zeros(self.dim)))


def pairwise_distances(a, b):
    """``|a_i - b_j|`` for point sets ``(..., n, d)`` and ``(..., m, d)``, accumulated per axis."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    r2 = None
    for k in range(a.shape[-1]):
        diff = a[..., :, None, k] - b[..., None, :, k]
        r2 = diff * diff if r2 is None else r2 + diff * diff
    return np.sqrt(r2)


class RadialKernel(StationaryKernel):
    def radial(self, r):
        raise NotImplementedError

    def pairwise(self, a, b):
        return self.radial(pairwise_distances(a, b))

    def __call__(self, x):
        x = _as_points(x, self.dim)
        r = np.sqrt(np.sum(x * x, axis=-1))
        return self.radial(r)


@dataclass(frozen=True)
class Riesz(RadialKernel):
    """``|x|**-alpha`` with ``0 < alpha < min(2, d)``."""

    alpha: float
    dim: int = 1

    def __post_init__(self):
        if not 0.0 < self.alpha < min(2.0, self.dim):
            raise ValueError(f"Riesz needs 0 < alpha < min(2, d); got alpha={self.alpha}, d={self.dim}")

    @property
    def singular(self):
        return True

    def radial(self, r):
        r = np.asarray(r, dtype=float)
        with np.errstate(divide="ignore"):
            return r ** (-self.alpha)

    @property
    def normalization(self):
        """Constant ``c(d, alpha)`` in the density ``c * rho**(alpha - d)``."""
        a, d = self.alpha, self.dim
        return 2.0 ** (-a) * math.pi ** (-d / 2) * math.gamma((d - a) / 2) / math.gamma(a / 2)

    def spectral_density(self):
        c, a, d = self.normalization, self.alpha, self.dim
        return SpectralDensity(d, lambda rho: c * rho ** (a - d), tail_exponent=d - a)


@dataclass(frozen=True)
class LogPlus(RadialKernel):
    """``log_+(T / |x|)`` with correlation length ``T``."""

    T: float = 1.0
    dim: int = 1

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("LogPlus needs T > 0")

    @property
    def singular(self):
        return True

    def radial(self, r):
        r = np.asarray(r, dtype=float)
        with np.errstate(divide="ignore"):
            return np.maximum(np.log(self.T / r), 0.0)


@dataclass(frozen=True)
class TruncPower(RadialKernel):
    """Truncated power ``(1 - |x|/M)_+^l``.

    Positive definite on R^d once ``l >= floor(d/2) + 1``; smaller ``l`` is
    rejected unless ``validate=False`` (used to probe the threshold).
    """

    l: float = 2.0
    scale: float = 1.0
    dim: int = 1
    validate: bool = field(default=True, compare=False, repr=False)

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("TruncPower needs scale M > 0")
        if self.validate and self.l < self.dim // 2 + 1:
            raise ValueError(
                f"TruncPower with l={self.l} is not positive definite in d={self.dim}; "
                f"need l >= {self.dim // 2 + 1}"
            )

    def radial(self, r):
        r = np.asarray(r, dtype=float)
        return np.maximum(1.0 - r / self.scale, 0.0) ** self.l


@dataclass(frozen=True)
class Bessel(RadialKernel):
    """Bessel potential ``G_s`` with spectral density ``(2 pi)^-d (1 + rho^2)^(-s/2)``."""

    s: float = 2.0
    dim: int = 2

    def __post_init__(self):
        if not self.s > 0:
            raise ValueError("Bessel needs s > 0")

    @property
    def singular(self):
        return self.s <= self.dim

    def radial(self, r):
        return bessel_G_radial(self.s, self.dim, r)

    def spectral_density(self):
        s, d = self.s, self.dim
        return SpectralDensity(
            d, lambda rho: (2 * math.pi) ** (-d) * (1.0 + rho**2) ** (-s / 2), tail_exponent=s
        )


@dataclass(frozen=True)
class CosineAtoms(StationaryKernel):
    """``sum_i w_i cos(xi_i . x)``.

    Each atom ``(xi_i, w_i)`` stands for the symmetric pair of masses
    ``w_i / 2`` at ``+xi_i`` and ``-xi_i``, so the spectral measure is always
    symmetric. An atom at the origin gives the constant kernel.
    """

    xi: tuple
    w: tuple
    dim: int = 1

    def __post_init__(self):
        xi = tuple(tuple(float(c) for c in np.atleast_1d(v)) for v in self.xi)
        w = tuple(float(v) for v in self.w)
        if len(xi) != len(w) or not xi:
            raise ValueError("CosineAtoms needs matching non-empty xi and w")
        if any(len(v) != self.dim for v in xi):
            raise ValueError("atom frequencies must have length dim")
        if any(v <= 0 for v in w):
            raise ValueError("atom weights must be positive")
        object.__setattr__(self, "xi", xi)
        object.__setattr__(self, "w", w)

    @property
    def frequencies(self):
        return np.array(self.xi, dtype=float)

    @property
    def weights(self):
        return np.array(self.w, dtype=float)

    def __call__(self, x):
        x = _as_points(x, self.dim)
        return np.cos(x @ self.frequencies.T) @ self.weights

    def total_mass(self):
        return float(sum(self.w))

    def damped(self, eps):
        """Atoms with weights multiplied by ``exp(-eps |xi|^2 / 2)``."""
        f = self.frequencies
        w = self.weights * np.exp(-0.5 * eps * np.sum(f * f, axis=1))
        return CosineAtoms(self.xi, tuple(w), self.dim)


def constant_kernel(c, dim=1):
    """The kernel ``gamma = c`` as a single atom at frequency zero."""
    return CosineAtoms(((0.0,) * dim,), (float(c),), dim)


@dataclass(frozen=True)
class Scaled(StationaryKernel):
    c: float
    base: StationaryKernel

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError("Scaled needs c > 0")

    @property
    def dim(self):
        return self.base.dim

    @property
    def singular(self):
        return self.base.singular

    def __call__(self, x):
        return self.c * self.base(x)

    def pairwise(self, a, b):
        return self.c * self.base.pairwise(a, b)

    def radial(self, r):
        return self.c * self.base.radial(r)

    def spectral_density(self):
        sd = self.base.spectral_density()
        if sd is None:
            return None
        c = self.c
        return SpectralDensity(sd.dim, lambda rho: c * sd.density(rho), sd.tail_exponent)


@dataclass(frozen=True)
class Mollified(StationaryKernel):
    """Heat-kernel smoothing ``gamma_eps(x) = int gamma(y) p_eps(x - y) dy``."""

    eps: float
    base: StationaryKernel

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("mollification needs eps > 0")

    @property
    def dim(self):
        return self.base.dim

    def __call__(self, x):
        base = self.base
        if isinstance(base, CosineAtoms):
            return base.damped(self.eps)(x)
        if isinstance(base, Scaled):
            return base.c * Mollified(self.eps, base.base)(x)
        if isinstance(base, Mollified):
            return Mollified(self.eps + base.eps, base.base)(x)
        x = _as_points(x, self.dim)
        return self.radial(np.sqrt(np.sum(x * x, axis=-1)))

    def pairwise(self, a, b):
        inner = self.base
        while isinstance(inner, (Scaled, Mollified)):
            inner = inner.base
        if isinstance(inner, RadialKernel):
            return self.radial(pairwise_distances(a, b))
        return super().pairwise(a, b)

    def radial(self, r):
        base = self.base
        if isinstance(base, Scaled):
            return base.c * Mollified(self.eps, base.base).radial(r)
        if isinstance(base, Mollified):
            return Mollified(self.eps + base.eps, base.base).radial(r)
        if isinstance(base, Riesz):
            return _riesz_mollified(base.alpha, base.dim, self.eps, r)
        if isinstance(base, (LogPlus, TruncPower, Bessel)):
            return _mollified_table(base, self.eps)(r)
        raise Unsupported(f"no radial form for mollified {type(base).__name__}")

    def spectral_density(self):
        sd = self.base.spectral_density()
        if sd is None:
            return None
        eps = self.eps
        return SpectralDensity(
            sd.dim, lambda rho: sd.density(rho) * np.exp(-0.5 * eps * rho**2), math.inf
        )


# ---------------------------------------------------------------------------
# mollification machinery


def _riesz_mollified(alpha, d, eps, r):
    # E|x + sqrt(eps) Z|^-alpha via the noncentral chi-square moment and Kummer's transform.
    r = np.asarray(r, dtype=float)
    pref = (2 * eps) ** (-alpha / 2) * math.gamma((d - alpha) / 2) / math.gamma(d / 2)
    return pref * special.hyp1f1(alpha / 2, d / 2, -(r * r) / (2 * eps))


def _spherical_gauss(nu, z):
    """``z**-nu * exp(-z) * I_nu(z)``, continuous at ``z = 0``."""
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    small = z < 1e-300
    out[small] = 2.0 ** (-nu) / math.gamma(nu + 1)
    zs = z[~small]
    out[~small] = zs ** (-nu) * special.ive(nu, zs)
    return out


def _table_nodes(width, features, r_max):
    # spacing proportional to the local curvature scale (width + distance to a feature)
    nodes = [0.0]
    r = 0.0
    while r < r_max:
        dist = min(abs(r - f) for f in features)
        r = min(r + (width + dist) / _NODES_PER_WIDTH, r_max)
        nodes.append(r)
    return np.array(nodes)


def _quad_vec(f, a, b, points=None):
    res = integrate.quad_vec(
        f,
        a,
        b,
        epsabs=1e-14,
        epsrel=MOLLIFY_EPSREL,
        norm="max",
        limit=MOLLIFY_MAX_EVALS // 21,
        points=points,
        full_output=True,
    )
    value, err, info = res
    if not info.success:
        raise QuadratureError(f"mollification quadrature did not converge: {info.message}")
    return value


def radial_heat_convolution(f, d, eps, r, support):
    """``(gamma * p_eps)`` at radii ``r`` for a radial ``gamma(y) = f(|y|)`` supported in ``[0, support]``."""
    r = np.atleast_1d(np.asarray(r, dtype=float))
    nu = d / 2 - 1

    def integrand(rho):
        z = r * rho / eps
        return (
            f(rho)
            * rho ** (d - 1)
            * _spherical_gauss(nu, z)
            * np.exp(-((r - rho) ** 2) / (2 * eps))
        )

    s = math.sqrt(eps)
    pts = [p for p in (s, 4 * s) if p < support]
    return eps ** (-d / 2) * _quad_vec(integrand, 0.0, support, points=pts or None)


def _bessel_mollified_values(s, d, eps, r):
    # G_s * p_eps = Gamma(s/2)^-1 int t^(s/2-1) e^-t p_{2t+eps} dt, with t = u^(2/s).
    r = np.atleast_1d(np.asarray(r, dtype=float))
    pref = (4 * math.pi) ** (-d / 2) / math.gamma(s / 2) * (2.0 / s)

    def integrand(u):
        t = u ** (2.0 / s)
        return np.exp(-t) * (t + eps / 2) ** (-d / 2) * np.exp(-(r * r) / (4 * t + 2 * eps))

    return pref * _quad_vec(integrand, 0.0, np.inf)


class _RadialTable:
    """Cubic spline through quadrature nodes, resampled on a uniform grid for fast lookup.

    The uniform grid has the finest node spacing and stores per-interval
    cubic Hermite coefficients taken from the spline, so lookups need no
    search.
    """

    def __init__(self, nodes, values, r_max, tail, step):
        self.spline = interpolate.CubicSpline(nodes, values, bc_type=((1, 0.0), "not-a-knot"))
        self.r_max = r_max
        self.tail = tail
        n = int(math.ceil(r_max / step))
        self.step = r_max / n
        u = np.linspace(0.0, r_max, n + 1)
        y = self.spline(u)
        dy = self.spline(u, 1) * self.step
        # p(t) = c0 + c1 t + c2 t^2 + c3 t^3 on [u_i, u_{i+1}], t in [0, 1]
        self.c0 = np.ascontiguousarray(y[:-1])
        self.c1 = np.ascontiguousarray(dy[:-1])
        self.c2 = 3 * (y[1:] - y[:-1]) - 2 * dy[:-1] - dy[1:]
        self.c3 = 2 * (y[:-1] - y[1:]) + dy[:-1] + dy[1:]

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        x = np.minimum(r, self.r_max) * (1.0 / self.step)
        i = np.minimum(x.astype(np.intp), len(self.c0) - 1)
        t = x - i
        out = self.c3.take(i)
        out *= t
        out += self.c2.take(i)
        out *= t
        out += self.c1.take(i)
        out *= t
        out += self.c0.take(i)
        far = r > self.r_max
        if far.any():
            out = np.where(far, self.tail(r), out)
        return out


@functools.lru_cache(maxsize=64)
def _mollified_table(base, eps):
    d = base.dim
    w = math.sqrt(eps)
    if isinstance(base, LogPlus):
        support = base.T
        r_max = support + _GAUSS_TAIL * w
        nodes = _table_nodes(w, (0.0, support), r_max)
        values = radial_heat_convolution(base.radial, d, eps, nodes, support)
        tail = np.zeros_like
    elif isinstance(base, TruncPower):
        support = base.scale
        r_max = support + _GAUSS_TAIL * w
        nodes = _table_nodes(w, (0.0, support), r_max)
        values = radial_heat_convolution(base.radial, d, eps, nodes, support)
        tail = np.zeros_like
    elif isinstance(base, Bessel):
        r_max = 60.0 + _GAUSS_TAIL * w
        nodes = _table_nodes(w, (0.0,), r_max)
        values = _bessel_mollified_values(base.s, d, eps, nodes)
        tail = base.radial
    else:  # pragma: no cover - guarded by Mollified.radial
        raise Unsupported(type(base).__name__)
    return _RadialTable(nodes, values, r_max, tail, w / _NODES_PER_WIDTH)


# ---------------------------------------------------------------------------
# operations


def eval_gamma(kernel, x):
    """``gamma(x)`` for one displacement vector (``+inf`` at 0 for singular kernels)."""
    val = np.asarray(kernel(_as_points(x, kernel.dim)))
    return float(val) if val.ndim == 0 else val


def mollify(kernel, eps):
    """Return ``Mollified(eps, kernel)``; evaluation at 0 is always finite."""
    if not eps > 0:
        raise ValueError(f"mollification needs eps > 0, got {eps}")
    return Mollified(float(eps), kernel)


@dataclass(frozen=True)
class CovarianceKernel:
    """``k(x, y) = log_+(T / |x - y|) + g(x, y)`` with ``|g| <= g_sup``.

    ``g`` takes two arrays of points ``(..., d)`` and returns ``(...)``; it
    must be symmetric. ``g=None`` means ``g = 0``.
    """

    T: float = 1.0
    dim: int = 1
    g: Optional[Callable] = None
    g_sup: float = 0.0

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("CovarianceKernel needs T > 0")
        if self.g is not None and not self.g_sup >= 0:
            raise ValueError("declared sup-norm of g must be nonnegative")

    @property
    def stationary_part(self):
        return LogPlus(self.T, self.dim)

    @property
    def is_stationary(self):
        return self.g is None

    def bounded_part(self, x, y):
        if self.g is None:
            return np.zeros(np.broadcast_shapes(np.shape(x)[:-1], np.shape(y)[:-1]))
        vals = np.asarray(self.g(x, y), dtype=float)
        if np.any(np.abs(vals) > self.g_sup * (1 + 1e-12)):
            raise ValueError("g exceeds its declared sup-norm")
        return vals

    def __call__(self, x, y):
        x = _as_points(x, self.dim)
        y = _as_points(y, self.dim)
        return self.stationary_part(x - y) + self.bounded_part(x, y)

    def pairwise(self, a, b):
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        return self(a[..., :, None, :], b[..., None, :, :])


def eval_k(cov, x, y):
    val = np.asarray(cov(x, y))
    return float(val) if val.ndim == 0 else val


@dataclass(frozen=True)
class DalangResult:
    finite: Optional[bool]
    value: float
    method: str

    @property
    def status(self):
        if self.finite is None:
            return "unknown"
        return "finite" if self.finite else "infinite"


def _real_space_dalang(kernel, r_max):
    # int (1+|xi|^2)^-1 mu(dxi) = int gamma(x) G_2(x) dx, G_2 the Bessel potential of order 2
    d = kernel.dim

    def f(r):
        return float(kernel.radial(r) * bessel_G_radial(2.0, d, r) * r ** (d - 1))

    val, _ = integrate.quad(f, 0.0, r_max, limit=400, epsrel=1e-10)
    return sphere_area(d) * val


def dalang_check(kernel):
    """Evaluate ``int (1 + |xi|^2)^-1 mu(dxi)``.

    Analytic densities are integrated radially; finiteness is decided by the
    tail exponent (the integral converges iff ``tau > d - 2``). Atomic
    measures are summed. Truncated powers use the real-space pairing with the
    order-2 Bessel potential. Anything else is reported as unknown.
    """
    if isinstance(kernel, Scaled):
        inner = dalang_check(kernel.base)
        return DalangResult(inner.finite, kernel.c * inner.value, inner.method)
    if isinstance(kernel, CosineAtoms):
        f = kernel.frequencies
        val = float(np.sum(kernel.weights / (1.0 + np.sum(f * f, axis=1))))
        return DalangResult(True, val, "atoms")
    if isinstance(kernel, Mollified) and isinstance(kernel.base, CosineAtoms):
        return dalang_check(kernel.base.damped(kernel.eps))
    base = kernel.base if isinstance(kernel, Mollified) else kernel
    if isinstance(base, TruncPower):
        r_max = base.scale + (_GAUSS_TAIL * math.sqrt(kernel.eps) if kernel is not base else 0.0)
        return DalangResult(True, _real_space_dalang(kernel, r_max), "real-space")
    sd = kernel.spectral_density()
    if sd is None:
        return DalangResult(None, math.nan, "unknown")
    d = kernel.dim
    if sd.tail_exponent is not None and sd.tail_exponent <= d - 2:
        return DalangResult(False, math.inf, "tail-exponent")
    return DalangResult(True, sd.radial_integral(lambda rho: 1.0 / (1.0 + rho * rho)), "spectral")


@dataclass(frozen=True)
class GramCheck:
    min_eigenvalue: float
    trace: float
    passed: bool


def gram_psd_check(kernel, points, tol=1e-8):
    """Minimum eigenvalue of the Gram matrix ``gamma(x_i - x_j)``.

    Passes iff ``min_eig >= -tol * trace``. Singular kernels have an infinite
    diagonal and must be mollified first.
    """
    pts = _as_points(points, kernel.dim)
    if pts.ndim == 1:
        pts = pts[None]
    if kernel.singular:
        diffs = pts[:, None, :] - pts[None, :, :]
        n = len(pts)
        dup = np.any(np.all(diffs == 0, axis=-1) & ~np.eye(n, dtype=bool))
        why = "duplicate points" if dup else "an infinite diagonal"
        raise ValueError(f"singular kernel gives {why}; test its mollified form instead")
    G = kernel.pairwise(pts, pts)
    G = 0.5 * (G + G.T)
    lam = float(np.linalg.eigvalsh(G)[0])
    tr = float(np.trace(G))
    return GramCheck(lam, tr, lam >= -tol * tr)


def bessel_G_radial(s, d, r):
    """Bessel potential at radius ``r`` via ``K_nu``, ``nu = (s - d)/2``.

    ``G_s(r) = (4 pi)^(-d/2) / Gamma(s/2) * 2 (r/2)^nu K_nu(r)``.
    """
    r = np.asarray(r, dtype=float)
    nu = (s - d) / 2
    pref = (4 * math.pi) ** (-d / 2) / math.gamma(s / 2)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        out = pref * 2.0 * (r / 2) ** nu * special.kv(nu, r)
    at0 = r == 0
    if np.any(at0):
        v0 = pref * math.gamma(nu) if nu > 0 else math.inf
        out = np.where(at0, v0, out)
    return out


def _bessel_G_quad(s, d, r):
    # subordination integral (4 pi)^(-d/2)/Gamma(s/2) int t^((s-d)/2-1) exp(-t - r^2/(4t)) dt
    a = (s - d) / 2 - 1
    f = lambda t: t**a * math.exp(-t - r * r / (4 * t))
    pts = [r / 2] if r > 0 else None
    lo, _ = integrate.quad(f, 0.0, max(1.0, r), points=pts, limit=400, epsabs=0, epsrel=1e-12)
    hi, _ = integrate.quad(f, max(1.0, r), np.inf, limit=400, epsabs=0, epsrel=1e-12)
    return (4 * math.pi) ** (-d / 2) / math.gamma(s / 2) * (lo + hi)


def bessel_G(s, d, x, method="kv"):
    """Bessel potential ``G_s`` at a point ``x`` of R^d.

    ``method="quad"`` evaluates the subordination integral by adaptive
    quadrature instead of the closed form.
    """
    if not s > 0:
        raise ValueError("s must be positive")
    r = float(np.linalg.norm(_as_points(x, d)))
    if r == 0 and s <= d:
        raise ValueError(f"G_s is singular at 0 when s <= d (s={s}, d={d})")
    if method == "quad":
        return _bessel_G_quad(s, d, r)
    return float(bessel_G_radial(s, d, r))


def riesz_domination_constant(alpha):
    """Smallest ``C >= 0`` with ``log_+(1/r) <= r**-alpha + C`` for all ``r > 0``.

    The gap ``log(1/r) - r**-alpha`` is concave in ``log r`` with its peak at
    ``r = alpha**(1/alpha)``, so it is maximised over ``u = log r`` on a
    bounded interval.
    """
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    gap = lambda u: -u - math.exp(-alpha * u)
    lo = min(-60.0, 2 * math.log(alpha) / alpha)
    res = optimize.minimize_scalar(
        lambda u: -gap(u), bounds=(lo, 0.0), method="bounded", options={"xatol": 1e-12}
    )
    return max(0.0, gap(res.x), gap(0.0))


def covariance_domination_constant(cov, alpha):
    """A constant ``C`` with ``|k(x, y)| <= |x - y|**-alpha + C`` everywhere."""
    return riesz_domination_constant(alpha) + max(math.log(cov.T), 0.0) + cov.g_sup


def condition_H_report(kernel, radii):
    """Ratios ``gamma(x) / log(1/|x|)`` along the first axis at the given radii."""
    radii = np.asarray(radii, dtype=float)
    if np.any((radii <= 0) | (radii >= 1)):
        raise ValueError("radii must lie in (0, 1)")
    pts = np.zeros((len(radii), kernel.dim))
    pts[:, 0] = radii
    return kernel(pts) / np.log(1.0 / radii)


# ---------------------------------------------------------------------------
# config round trip


def kernel_to_dict(kernel):
    if isinstance(kernel, Riesz):
        return {"family": "riesz", "alpha": kernel.alpha, "dim": kernel.dim}
    if isinstance(kernel, LogPlus):
        return {"family": "logplus", "T": kernel.T, "dim": kernel.dim}
    if isinstance(kernel, TruncPower):
        return {"family": "truncpower", "l": kernel.l, "scale": kernel.scale, "dim": kernel.dim}
    if isinstance(kernel, Bessel):
        return {"family": "bessel", "s": kernel.s, "dim": kernel.dim}
    if isinstance(kernel, CosineAtoms):
        return {
            "family": "atoms",
            "xi": [list(v) for v in kernel.xi],
            "w": list(kernel.w),
            "dim": kernel.dim,
        }
    if isinstance(kernel, Scaled):
        return {"family": "scaled", "c": kernel.c, "base": kernel_to_dict(kernel.base)}
    if isinstance(kernel, Mollified):
        return {"family": "mollified", "eps": kernel.eps, "base": kernel_to_dict(kernel.base)}
    raise TypeError(f"cannot serialise {type(kernel).__name__}")


_FIELDS = {
    "riesz": {"alpha", "dim"},
    "logplus": {"T", "dim"},
    "truncpower": {"l", "scale", "dim"},
    "bessel": {"s", "dim"},
    "atoms": {"xi", "w", "dim"},
    "scaled": {"c", "base"},
    "mollified": {"eps", "base"},
}


def kernel_from_dict(spec):
    spec = dict(spec)
    family = spec.pop("family", None)
    if family not in _FIELDS:
        raise ValueError(f"unknown kernel family {family!r}")
    extra = set(spec) - _FIELDS[family]
    if extra:
        raise ValueError(f"unknown keys for {family}: {sorted(extra)}")
    if family == "riesz":
        return Riesz(float(spec["alpha"]), int(spec.get("dim", 1)))
    if family == "logplus":
        return LogPlus(float(spec.get("T", 1.0)), int(spec.get("dim", 1)))
    if family == "truncpower":
        return TruncPower(float(spec.get("l", 2.0)), float(spec.get("scale", 1.0)), int(spec.get("dim", 1)))
    if family == "bessel":
        return Bessel(float(spec["s"]), int(spec.get("dim", 2)))
    if family == "atoms":
        xi = tuple(tuple(v) for v in spec["xi"])
        return CosineAtoms(xi, tuple(spec["w"]), int(spec.get("dim", len(xi[0]))))
    if family == "scaled":
        return Scaled(float(spec["c"]), kernel_from_dict(spec["base"]))
    return Mollified(float(spec["eps"]), kernel_from_dict(spec["base"]))


def _toml_value(v):
    if isinstance(v, dict):
        return "{ " + ", ".join(f"{k} = {_toml_value(x)}" for k, x in v.items()) + " }"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return repr(v)
    return '"' + str(v) + '"'


def format_kernel(kernel):
    """Inline config block, e.g. ``kernel = { family = "riesz", alpha = 0.5, dim = 1 }``."""
    return "kernel = " + _toml_value(kernel_to_dict(kernel))


def parse_kernel(text):
    from ._toml import loads

    text = text.strip()
    if not text.startswith("kernel"):
        text = "kernel = " + text
    return kernel_from_dict(loads(text)["kernel"])
