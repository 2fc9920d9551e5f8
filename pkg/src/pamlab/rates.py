"""Upper-branch roots of ``log(v) / v = c`` and the rate sequences built on them.

The map ``v -> log(v)/v`` rises to its maximum ``1/e`` at ``v = e`` and then
decreases to 0, so for ``0 < c < 1/e`` there are two roots and we always
return the one above ``e``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import SolvabilityError

INV_E = math.exp(-1.0)
RESIDUAL_TOL = 1e-12


@dataclass(frozen=True)
class RateSolution:
    value: float
    c: float
    residual: float
    iterations: int
    branch: str = "upper"


def _residual(v, c):
    return math.log(v) / v - c


def solve_rate(c):
    """Root ``v > e`` of ``log(v)/v = c``.

    Bisection on a bracket where ``f(v) = log(v)/v - c`` changes sign, then a
    few Newton steps in extended precision. Newton alone is unsafe near
    ``c = 1/e`` where ``f'`` vanishes at ``e``.
    """
    c = float(c)
    if not c > 0:
        raise ValueError(f"c must be positive, got {c}")
    if c >= INV_E:
        raise SolvabilityError(
            f"log(v)/v = {c:.6g} has no root above e: need c < 1/e = {INV_E:.6g}", c=c
        )
    lo = math.e
    hi = max(math.e + 1.0, (2.0 / c) * math.log(2.0 / c) * 4.0)
    while _residual(hi, c) > 0:  # defensive; the bracket above always suffices
        hi *= 2.0
    iterations = 0
    # f(lo) > 0 > f(hi)
    while hi - lo > 1e-10 * hi and iterations < 400:
        mid = 0.5 * (lo + hi)
        if _residual(mid, c) > 0:
            lo = mid
        else:
            hi = mid
        iterations += 1
    v = np.longdouble(0.5 * (lo + hi))
    cl = np.longdouble(c)
    for _ in range(4):
        f = np.log(v) / v - cl
        fp = (1 - np.log(v)) / (v * v)
        if fp == 0:
            break
        step = f / fp
        nv = v - step
        if not (lo <= float(nv) <= hi):
            break
        v = nv
        iterations += 1
        if abs(step) <= 1e-19 * v:
            break
    value = float(v)
    if value <= math.e:
        value = math.nextafter(math.e, math.inf)
    res = _residual(value, c)
    if abs(res) > RESIDUAL_TOL:
        # pure bisection to the last ulp; f is monotone on the bracket
        a, b = lo, hi
        while b - a > 4 * math.ulp(b):
            m = 0.5 * (a + b)
            if _residual(m, c) > 0:
                a = m
            else:
                b = m
            iterations += 1
        value = a if abs(_residual(a, c)) < abs(_residual(b, c)) else b
        res = _residual(value, c)
    return RateSolution(value, c, abs(res), iterations)


def min_admissible_N(C=1.0, t=1.0):
    """Smallest integer N with ``2/(N C t) < 1/e``."""
    n = math.floor(2.0 * math.e / (C * t)) + 1
    while 2.0 / (n * C * t) >= INV_E:
        n += 1
    return n


def solve_lambda(N):
    """``lambda_N``: the root above e of ``log(l)/l = 2/N``."""
    N = int(N)
    if N < 1:
        raise ValueError("N must be a positive integer")
    if 2.0 / N >= INV_E:
        n0 = min_admissible_N()
        raise SolvabilityError(
            f"lambda_N undefined for N={N}: 2/N >= 1/e; the smallest admissible N is {n0}",
            c=2.0 / N,
            min_N=n0,
        )
    return solve_rate(2.0 / N)


def solve_sigma(N, C=1.0, t=1.0):
    """``sigma_N``: the root above e of ``log(s)/s = 2/(N C t)``."""
    N = int(N)
    if not (C > 0 and t > 0):
        raise ValueError("C and t must be positive")
    c = 2.0 / (N * C * t)
    if c >= INV_E:
        n0 = min_admissible_N(C, t)
        raise SolvabilityError(
            f"sigma_N undefined for N={N}, C={C}, t={t}; the smallest admissible N is {n0}",
            c=c,
            min_N=n0,
        )
    return solve_rate(c)


RATE_COLUMNS = (
    "N",
    "lambda",
    "sigma",
    "lambda_over_N",
    "ratio2N",
    "sigma_over_lambda",
    "residual_lambda",
    "residual_sigma",
)


def rate_diagnostics(N_list, C=1.0, t=1.0):
    """One row per N: lambda_N, sigma_N and the ratios tracking their growth.

    ``ratio2N`` is ``lambda_{2N} / lambda_N`` (tends to 2 if lambda_N is
    regularly varying of index 1); ``sigma_over_lambda`` tends to ``t`` when
    ``C = 1``.
    """
    rows = []
    for N in N_list:
        lam = solve_lambda(N)
        lam2 = solve_lambda(2 * N)
        sig = solve_sigma(N, C, t)
        rows.append(
            {
                "N": int(N),
                "lambda": lam.value,
                "sigma": sig.value,
                "lambda_over_N": lam.value / N,
                "ratio2N": lam2.value / lam.value,
                "sigma_over_lambda": sig.value / lam.value,
                "residual_lambda": lam.residual,
                "residual_sigma": sig.residual,
            }
        )
    return rows
