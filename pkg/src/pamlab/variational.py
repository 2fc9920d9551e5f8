"""Maximisation of the quartic interaction energy over unit-norm functions.

For a kernel ``gamma`` and ``g`` with ``||g||_2 = 1`` the objective is

    E(g) = 1/2 int int gamma(x - y) g(x)^2 g(y)^2 dx dy - 1/2 int |grad g|^2,

discretised on a periodic box ``[-L, L)^d`` with ``n`` points per axis. The
interaction is a periodic convolution over minimal-image lags and the
Dirichlet term uses forward differences, so the gradient below is the exact
gradient of the discrete objective.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import integrate

from .errors import NotConverged, Unsupported
from .kernels import CosineAtoms, LogPlus, Mollified, Riesz, Scaled
from .paths import path_rng

STREAM_RESTART = 7


@dataclass(frozen=True)
class GridSpec:
    d: int
    L: float
    n: int

    def __post_init__(self):
        if self.d not in (1, 2):
            raise ValueError("only d = 1 and d = 2 grids are supported")
        if self.n < 16 or self.n & (self.n - 1):
            raise ValueError("n must be a power of two and at least 16")
        if not self.L > 0:
            raise ValueError("L must be positive")

    @property
    def h(self):
        return 2.0 * self.L / self.n

    @property
    def cell_volume(self):
        return self.h**self.d

    @property
    def shape(self):
        return (self.n,) * self.d

    def axis(self):
        return -self.L + self.h * np.arange(self.n)

    def coords(self):
        """Point coordinates of shape ``(n, ..., n, d)``."""
        ax = self.axis()
        return np.stack(np.meshgrid(*([ax] * self.d), indexing="ij"), axis=-1)

    def lag_indices(self):
        """Minimal-image lag index along one axis, in FFT order."""
        k = np.arange(self.n)
        return np.where(k < self.n // 2, k, k - self.n)

    def lags(self):
        """Minimal-image displacement vectors in FFT order, shape ``(n, ..., n, d)``."""
        k = self.lag_indices() * self.h
        return np.stack(np.meshgrid(*([k] * self.d), indexing="ij"), axis=-1)

    def laplacian_symbol(self):
        """Eigenvalues of the periodic 3-point Laplacian (nonpositive)."""
        w = 2.0 * np.pi * np.fft.fftfreq(self.n)
        lam1 = (2.0 * np.cos(w) - 2.0) / self.h**2
        if self.d == 1:
            return lam1
        return lam1[:, None] + lam1[None, :]


@dataclass(frozen=True, eq=False)
class GridFunction:
    """Nonnegative grid values with ``sum g^2 h^d = 1``."""

    values: np.ndarray
    grid: GridSpec

    @classmethod
    def normalized(cls, values, grid):
        v = np.abs(np.asarray(values, dtype=float)).reshape(grid.shape)
        nrm = math.sqrt(float(np.sum(v * v)) * grid.cell_volume)
        if not nrm > 0:
            raise ValueError("cannot normalise the zero function")
        return cls(v / nrm, grid)

    @property
    def norm2(self):
        return float(np.sum(self.values**2)) * self.grid.cell_volume


@dataclass(frozen=True)
class VariationalResult:
    energy: float
    potential_term: float
    kinetic_term: float
    optimizer: Optional[GridFunction] = None
    iterations: int = 0
    converged: bool = True
    restarts_used: int = 0
    restart_index: int = 0
    history: tuple = field(default=(), repr=False)


# ---------------------------------------------------------------------------
# kernel samples on the lag grid


def _antideriv_riesz(alpha, y):
    return np.sign(y) * np.abs(y) ** (1 - alpha) / (1 - alpha)


def _antideriv_logplus(T, y):
    # int_0^y log_+(T/|u|) du for y >= 0, odd extension
    a = np.minimum(np.abs(y), T)
    with np.errstate(divide="ignore", invalid="ignore"):
        core = np.where(a > 0, a * np.log(T / np.where(a > 0, a, 1.0)) + a, 0.0)
    return np.sign(y) * core


def _cell_average_1d(kernel, centers, h):
    lo, hi = centers - h / 2, centers + h / 2
    base, c = kernel, 1.0
    if isinstance(base, Scaled):
        base, c = base.base, base.c
    if isinstance(base, Riesz):
        return c * (_antideriv_riesz(base.alpha, hi) - _antideriv_riesz(base.alpha, lo)) / h
    if isinstance(base, LogPlus):
        return c * (_antideriv_logplus(base.T, hi) - _antideriv_logplus(base.T, lo)) / h
    out = np.empty_like(centers)
    for i, (a, b) in enumerate(zip(lo, hi)):
        pts = [0.0] if a < 0 < b else None
        val, _ = integrate.quad(lambda y: float(kernel.radial(abs(y))), a, b, points=pts, limit=200)
        out[i] = val / h
    return out


def _cell_average_2d(kernel, lags, h):
    # tensor Gauss-Legendre away from the origin; polar quadrature on the cells next to it
    x, w = np.polynomial.legendre.leggauss(12)
    x, w = 0.5 * h * x, 0.5 * w
    off = np.stack(np.meshgrid(x, x, indexing="ij"), axis=-1).reshape(-1, 2)
    ww = np.outer(w, w).ravel()
    flat = lags.reshape(-1, 2)
    out = np.empty(len(flat))
    near = np.max(np.abs(flat), axis=1) < 1.5 * h
    far = ~near
    r = np.linalg.norm(flat[far][:, None, :] + off[None], axis=-1)
    out[far] = kernel.radial(r) @ ww
    f = lambda rr: float(kernel.radial(rr))
    for i in np.flatnonzero(near):
        cx, cy = flat[i]
        if cx == 0 and cy == 0:
            # square [-h/2, h/2]^2 as 8 triangles in polar coordinates
            val, _ = integrate.quad(
                lambda th: integrate.quad(lambda rr: f(rr) * rr, 0, 0.5 * h / math.cos(th), limit=200)[0],
                0, math.pi / 4, limit=200,
            )
            out[i] = 8 * val / (h * h)
        else:
            val, _ = integrate.dblquad(
                lambda yy, xx: f(math.hypot(xx, yy)), cx - h / 2, cx + h / 2, cy - h / 2, cy + h / 2,
            )
            out[i] = val / (h * h)
    return out.reshape(lags.shape[:-1])


def kernel_lag_samples(kernel, grid):
    """Kernel values on the minimal-image lags (FFT order).

    Bounded kernels are sampled pointwise; singular ones are averaged over
    the grid cell around each lag.
    """
    lags = grid.lags()
    if not getattr(kernel, "singular", False):
        return np.asarray(kernel(lags), dtype=float).reshape(grid.shape)
    if grid.d == 1:
        return _cell_average_1d(kernel, lags[..., 0], grid.h)
    return _cell_average_2d(kernel, lags, grid.h)


def dirichlet_form(g, grid):
    """``sum |forward difference of g|^2 h^d`` over all axes."""
    tot = 0.0
    for ax in range(grid.d):
        dg = (np.roll(g, -1, axis=ax) - g) / grid.h
        tot += float(np.sum(dg * dg))
    return tot * grid.cell_volume


class EnergyModel:
    """Discrete objective with cached kernel spectrum and Laplacian symbol."""

    def __init__(self, kernel, grid):
        if kernel.dim != grid.d:
            raise ValueError("kernel and grid dimensions differ")
        self.kernel = kernel
        self.grid = grid
        self.samples = kernel_lag_samples(kernel, grid)
        self._axes = tuple(range(grid.d))
        self.kernel_fft = np.fft.rfftn(self.samples, axes=self._axes)
        self.lap = grid.laplacian_symbol()

    def convolve(self, f):
        """``sum_y K(x - y) f(y)`` (no cell-volume factor)."""
        return np.fft.irfftn(np.fft.rfftn(f, axes=self._axes) * self.kernel_fft, s=self.grid.shape, axes=self._axes)

    def kinetic(self, g):
        return dirichlet_form(g, self.grid)

    def laplacian(self, g):
        h = self.grid.h
        out = np.zeros_like(g)
        for ax in range(self.grid.d):
            out += (np.roll(g, -1, axis=ax) - 2 * g + np.roll(g, 1, axis=ax)) / (h * h)
        return out

    def terms(self, g):
        """``(potential_term, kinetic_term)``, both already halved."""
        hv = self.grid.cell_volume
        f = g * g
        pot = float(np.sum(f * self.convolve(f))) * hv * hv
        return 0.5 * pot, 0.5 * self.kinetic(g)

    def energy(self, g):
        p, k = self.terms(g)
        return p - k

    def raw_gradient(self, g):
        """Partial derivatives of :meth:`energy` with respect to each grid value."""
        hv = self.grid.cell_volume
        return 2.0 * hv * hv * g * self.convolve(g * g) + hv * self.laplacian(g)

    def l2_gradient(self, g):
        return self.raw_gradient(g) / self.grid.cell_volume

    def precondition(self, v, kappa):
        """Apply ``(I - kappa Laplacian)^-1``."""
        rlap = self.lap[..., : self.grid.n // 2 + 1]
        return np.fft.irfftn(np.fft.rfftn(v, axes=self._axes) / (1.0 - kappa * rlap), s=self.grid.shape, axes=self._axes)


def _check_normalized(g, tol=1e-10):
    if abs(g.norm2 - 1.0) > tol:
        raise ValueError(f"grid function is not normalised (sum g^2 h^d = {g.norm2!r})")


def energy_real(g, kernel, grid=None, model=None):
    """Energy decomposition of a fixed normalised grid function."""
    grid = grid or g.grid
    _check_normalized(g)
    model = model or EnergyModel(kernel, grid)
    p, k = model.terms(g.values)
    return VariationalResult(p - k, p, k, g, 0, True, 0)


# ---------------------------------------------------------------------------
# spectral form


_GL_X, _GL_W = np.polynomial.legendre.leggauss(16)


def _fourier_sq(f, x, h, xi, sinc):
    # |sum_i f_i h e^{i xi x_i}|^2, optionally times the piecewise-constant factor sinc^2(xi h/2)
    amp = np.exp(1j * np.outer(xi, x)) @ (f * h)
    out = amp.real**2 + amp.imag**2
    if sinc:
        out = out * np.sinc(xi * h / (2 * np.pi)) ** 2
    return out


def _density_potential_1d(f, grid, sd, periods=8):
    x = grid.axis()
    h = grid.h
    period = 2 * np.pi / h
    width = min(np.pi / (4 * grid.L), period / 64)
    top = periods * period
    edges = np.arange(0.0, top + 0.5 * width, width)
    a = edges[1]
    # first cell: rho = a u^(1/p) with p chosen to absorb an integrable power singularity
    tau = sd.tail_exponent
    # local power of the density near 0, read off two small radii
    w0, w1 = float(sd(a * 1e-6)), float(sd(a * 1e-3))
    slope = math.log(w1 / w0) / math.log(1e3) if w0 > 0 and w1 > 0 else 0.0
    p = 1.0 + slope if slope < -1e-6 else 1.0  # density ~ rho^(p-1)
    u = 0.5 * (_GL_X + 1)
    rho0 = a * u ** (1.0 / p)
    first = (a**p / p) * np.sum(0.5 * _GL_W * _fourier_sq(f, x, h, rho0, True) * sd(rho0) / rho0 ** (p - 1))
    lo, hi = edges[1:-1], edges[2:]
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    nodes = (mid[:, None] + half[:, None] * _GL_X[None, :]).ravel()
    wts = (half[:, None] * _GL_W[None, :]).ravel()
    body = np.sum(wts * _fourier_sq(f, x, h, nodes, True) * sd(nodes))
    # tail: |A|^2 averages to h sum f^2 * h over a period; sinc^2 <= (2/(xi h))^2
    mean_sq = float(np.sum(f * f)) * h * h
    if tau is None or math.isinf(tau):
        tail = 0.0
    else:
        tail_int, _ = integrate.quad(lambda r: float(sd(r)) * (2.0 / (r * h)) ** 2 * 0.5, top, np.inf)
        tail = mean_sq * tail_int
    # both signs of xi
    return 2.0 * (first + body + tail)


def energy_spectral(g, kernel, grid=None):
    """Energy with the interaction written as ``int |F(g^2)(xi)|^2 mu(dxi)``.

    Atomic measures use the point sums of ``g^2`` (exact Parseval partner of
    :func:`energy_real` for atoms on the dual lattice of the box). Analytic
    densities treat ``g^2`` as piecewise constant on the cells and integrate
    over frequencies by Gauss-Legendre panels; they are supported in d = 1.
    """
    grid = grid or g.grid
    _check_normalized(g)
    f = g.values**2
    hv = grid.cell_volume
    atoms = None
    if isinstance(kernel, CosineAtoms):
        atoms = kernel
    elif isinstance(kernel, Mollified) and isinstance(kernel.base, CosineAtoms):
        atoms = kernel.base.damped(kernel.eps)
    elif isinstance(kernel, Scaled) and isinstance(kernel.base, CosineAtoms):
        atoms = CosineAtoms(kernel.base.xi, tuple(kernel.c * w for w in kernel.base.w), kernel.dim)
    if atoms is not None:
        pts = grid.coords().reshape(-1, grid.d)
        amp = np.exp(1j * pts @ atoms.frequencies.T).T @ f.ravel() * hv
        pot = float(np.sum(atoms.weights * (amp.real**2 + amp.imag**2)))
    else:
        sd = kernel.spectral_density()
        if sd is None:
            raise Unsupported(f"{type(kernel).__name__} has no spectral data")
        if grid.d != 1:
            raise Unsupported("analytic spectral densities are integrated in d = 1 only")
        pot = _density_potential_1d(f, grid, sd)
    return 0.5 * pot - 0.5 * dirichlet_form(g.values, grid)


# ---------------------------------------------------------------------------
# optimiser


@dataclass(frozen=True)
class SolverOptions:
    restarts: int = 6
    max_iters: int = 3000
    tol: float = 1e-10
    window: int = 25
    kappa: Optional[float] = None  # preconditioner strength; None means (L/4)^2
    armijo: float = 1e-4
    seed: int = 0
    workers: int = 1


def initial_guesses(grid, restarts, seed=0):
    """Constant function first, then Gaussian bumps of decreasing width."""
    out = [np.ones(grid.shape)]
    x = grid.coords()
    r2 = np.sum(x * x, axis=-1)
    wmax, wmin = grid.L / 2, 4 * grid.h
    k = max(restarts - 1, 1)
    for i in range(restarts - 1):
        w = wmax * (wmin / wmax) ** (i / max(k - 1, 1))
        rng = path_rng(seed, STREAM_RESTART, i)
        bump = np.exp(-r2 / (2 * w * w)) * (1 + 0.05 * rng.random(grid.shape))
        out.append(bump)
    return out[:restarts]


def ascend(model, g0, opts=SolverOptions()):
    """Preconditioned projected gradient ascent on the unit sphere from ``g0``."""
    grid = model.grid
    hv = grid.cell_volume
    g = GridFunction.normalized(g0, grid).values
    E = model.energy(g)
    hist = [E]
    kappa = (grid.L / 4.0) ** 2 if opts.kappa is None else opts.kappa
    step = 1.0
    converged = False
    it = 0
    for it in range(1, opts.max_iters + 1):
        G = model.l2_gradient(g)
        PG = model.precondition(G, kappa)
        Pg = model.precondition(g, kappa)
        D = PG - (np.sum(g * PG) / np.sum(g * Pg)) * Pg
        slope = float(np.sum(G * D)) * hv
        if not slope > 1e-300:
            converged = True
            break
        step = min(step * 2.0, 1e6)
        accepted = False
        while step > 1e-14:
            cand = np.abs(g + step * D)
            cand /= math.sqrt(float(np.sum(cand * cand)) * hv)
            Ec = model.energy(cand)
            if Ec >= E + opts.armijo * step * slope:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            converged = True  # no ascent possible at machine precision
            break
        g, E = cand, Ec
        hist.append(E)
        if len(hist) > opts.window:
            ref = hist[-1 - opts.window]
            if abs(E - ref) <= opts.tol * max(abs(E), 1e-300):
                converged = True
                break
    p, k = model.terms(g)
    return VariationalResult(
        p - k, p, k, GridFunction(g, grid), it, converged, 1, history=tuple(hist)
    )


def maximize_energy(kernel, grid, opts=SolverOptions(), model=None, raise_on_failure=True):
    """Best energy over a deterministic set of restarts.

    Ties are broken by restart index. Raises :class:`NotConverged` (with the
    best result attached) when the winning restart did not converge.
    """
    model = model or EnergyModel(kernel, grid)
    starts = initial_guesses(grid, opts.restarts, opts.seed)
    run = lambda g0: ascend(model, g0, opts)
    if opts.workers > 1:
        with ThreadPoolExecutor(max_workers=opts.workers) as pool:
            results = list(pool.map(run, starts))
    else:
        results = [run(g0) for g0 in starts]
    best_i = max(range(len(results)), key=lambda i: (results[i].energy, -i))
    b = results[best_i]
    best = VariationalResult(
        b.energy, b.potential_term, b.kinetic_term, b.optimizer, b.iterations, b.converged,
        len(results), best_i, b.history,
    )
    if raise_on_failure and not best.converged:
        raise NotConverged(f"best restart {best_i} did not converge in {opts.max_iters} iterations", best)
    return best


# ---------------------------------------------------------------------------
# envelope


@dataclass(frozen=True)
class EnvelopeReport:
    energy: float
    bound: float
    within_bounds: bool
    eps: tuple = ()
    eps_energies: tuple = ()
    eps_monotone: Optional[bool] = None


def envelope_checks(kernel, grid, bound=None, eps_list=(), opts=SolverOptions(), rel_tol=1e-8):
    """Check ``0 <= E <= K/2`` for ``0 <= gamma <= K`` and the monotone response to mollification.

    ``bound`` defaults to ``gamma(0)``. For each ``eps`` (sorted decreasing)
    the energy of the mollified kernel must not decrease as ``eps`` shrinks,
    up to ``rel_tol``.
    """
    res = maximize_energy(kernel, grid, opts, raise_on_failure=False)
    K = float(kernel.value_at_zero()) if bound is None else float(bound)
    ok = -rel_tol <= res.energy <= 0.5 * K * (1 + rel_tol)
    eps_sorted = tuple(sorted((float(e) for e in eps_list), reverse=True))
    energies = tuple(
        maximize_energy(Mollified(e, kernel), grid, opts, raise_on_failure=False).energy for e in eps_sorted
    )
    mono = None
    if energies:
        mono = all(b >= a - rel_tol * max(abs(a), abs(b)) for a, b in zip(energies, energies[1:]))
    return EnvelopeReport(res.energy, K, ok, eps_sorted, energies, mono)
