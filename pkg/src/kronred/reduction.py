"""Kron reduction: Schur complement, noise map and effective noise covariance.

Eliminating the fast buses of a linearized two-timescale system leaves
the slow buses coupled through the Schur complement

    J_red = J_SS - J_SF J_FF^-1 J_FS,

which is again (the negative of) a Laplacian.  The eliminated buses'
noise does not disappear: it enters the retained buses through the
noise map K = -J_SF J_FF^-1, so the effective noise

    xi = eta_S + K eta_F

is spatially correlated even when all bus noises are independent.  Its
equal-time covariance is Sigma_xi = diag(sigma_S^2) + K diag(sigma_F^2) K^T.
All solves use a Cholesky factorization of -J_FF (never an explicit
inverse).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import InputError, NumericsError
from .grid import FAST, SLOW, Bus, Grid, Line, LinearizedSystem


@dataclass(frozen=True)
class ReducedSystem:
    """Slow-bus dynamics after Kron reduction.

    ``noise_gain`` is the N_S x N_F map through which fast-bus noise
    enters the slow buses.  Per-bus parameter vectors (m, d, sigma, tau)
    are carried so heterogeneous systems can still be simulated; the
    closed-form variance path validates homogeneity itself.
    """

    slow_ids: tuple[int, ...]
    fast_ids: tuple[int, ...]
    j_red: np.ndarray
    noise_gain: np.ndarray
    sigma_slow: np.ndarray
    sigma_fast: np.ndarray
    tau_slow: np.ndarray
    tau_fast: np.ndarray
    m_slow: np.ndarray
    d_slow: np.ndarray
    sigma_xi: np.ndarray

    @property
    def n_slow(self) -> int:
        return len(self.slow_ids)

    @property
    def n_fast(self) -> int:
        return len(self.fast_ids)


def factor_fast_block(j_ff: np.ndarray):
    """Cholesky factor of -J_FF, verifying negative definiteness first."""
    n_f = j_ff.shape[0]
    if n_f == 0:
        return None
    eigs = np.linalg.eigvalsh(j_ff)
    scale = max(1.0, float(np.abs(eigs).max()))
    if eigs.max() >= -1e-12 * scale:
        raise NumericsError(
            f"fast block not negative definite: offending eigenvalue {eigs.max():.6e}")
    return cho_factor(-j_ff)


def _solve_ff(factor, rhs: np.ndarray) -> np.ndarray:
    """Solve J_FF X = rhs given the factor of -J_FF."""
    return -cho_solve(factor, rhs)


def schur_reduce(sys: LinearizedSystem) -> np.ndarray:
    """Schur complement J_red = J_SS - J_SF J_FF^-1 J_FS, symmetrized."""
    if sys.n_fast == 0:
        j_red = sys.j_ss.copy()
    else:
        factor = factor_fast_block(sys.j_ff)
        j_red = sys.j_ss - sys.j_sf @ _solve_ff(factor, sys.j_fs)
    return 0.5 * (j_red + j_red.T)


def noise_map(sys: LinearizedSystem) -> np.ndarray:
    """Noise map K = -J_SF J_FF^-1 (row i: weights of fast noise at slow bus i)."""
    if sys.n_fast == 0:
        return np.zeros((sys.n_slow, 0))
    factor = factor_fast_block(sys.j_ff)
    # K^T = -J_FF^-1 J_FS since J_FF is symmetric
    return -_solve_ff(factor, sys.j_fs).T


def _xi_covariance(k: np.ndarray, sigma_slow: np.ndarray, sigma_fast: np.ndarray) -> np.ndarray:
    if k.shape != (len(sigma_slow), len(sigma_fast)):
        raise InputError(
            f"noise map shape {k.shape} does not match sigma lengths "
            f"({len(sigma_slow)}, {len(sigma_fast)})")
    return np.diag(sigma_slow**2) + (k * sigma_fast**2) @ k.T


def effective_noise_covariance(red: ReducedSystem) -> np.ndarray:
    """Equal-time covariance of xi: diag(sigma_S^2) + K diag(sigma_F^2) K^T."""
    return _xi_covariance(red.noise_gain, red.sigma_slow, red.sigma_fast)


def reduce_grid(grid: Grid, sys: LinearizedSystem) -> ReducedSystem:
    """Assemble the full ReducedSystem for a grid and its linearization."""
    if tuple(grid.slow_ids) != sys.slow_ids or tuple(grid.fast_ids) != sys.fast_ids:
        raise InputError("linearized system does not belong to this grid")
    idx = grid.bus_index()
    s = [idx[i] for i in sys.slow_ids]
    f = [idx[i] for i in sys.fast_ids]
    sigma = grid.param_vector("sigma")
    tau = grid.param_vector("tau")
    k = noise_map(sys)
    return ReducedSystem(
        slow_ids=sys.slow_ids,
        fast_ids=sys.fast_ids,
        j_red=schur_reduce(sys),
        noise_gain=k,
        sigma_slow=sigma[s].copy(),
        sigma_fast=sigma[f].copy(),
        tau_slow=tau[s].copy(),
        tau_fast=tau[f].copy(),
        m_slow=sys.m_slow.copy(),
        d_slow=sys.d_slow.copy(),
        sigma_xi=_xi_covariance(k, sigma[s], sigma[f]),
    )


def make_star_grid(
    n_outer: int,
    center_class: str,
    b: float = 1.0,
    sigma: float = 0.01,
    m: float = 0.2,
    d: float = 0.05,
    tau: float = 0.1,
) -> Grid:
    """Star grid with uniform coupling, zero injections, uniform noise.

    The center bus (id 1) has ``center_class``; the n_outer outer buses
    (ids 2..n_outer+1) have the opposite class.  With zero injections
    the fixed point is theta* = 0 and the reduction closed forms of the
    two idealized star cases hold exactly.
    """
    if n_outer < 1:
        raise InputError(f"n_outer must be >= 1, got {n_outer}")
    if center_class not in (SLOW, FAST):
        raise InputError(f"center_class must be 'slow' or 'fast', got {center_class!r}")
    outer_class = FAST if center_class == SLOW else SLOW
    buses = [Bus(id=1, speed_class=center_class, m=m, d=d, p=0.0, sigma=sigma, tau=tau)]
    lines = []
    for k in range(n_outer):
        buses.append(Bus(id=k + 2, speed_class=outer_class, m=m, d=d, p=0.0, sigma=sigma, tau=tau))
        lines.append(Line(from_bus=1, to_bus=k + 2, b=b))
    return Grid(buses=tuple(buses), lines=tuple(lines))


# ---------------------------------------------------------------------------
# JSON serialization (CLI surface)
# ---------------------------------------------------------------------------

def reduced_system_to_dict(red: ReducedSystem) -> dict:
    """JSON-friendly dict with matrices as row-major nested lists."""
    return {
        "slow_ids": list(red.slow_ids),
        "fast_ids": list(red.fast_ids),
        "j_red": red.j_red.tolist(),
        "noise_gain": red.noise_gain.tolist(),
        "sigma_slow": red.sigma_slow.tolist(),
        "sigma_fast": red.sigma_fast.tolist(),
        "tau_slow": red.tau_slow.tolist(),
        "tau_fast": red.tau_fast.tolist(),
        "m_slow": red.m_slow.tolist(),
        "d_slow": red.d_slow.tolist(),
        "sigma_xi": red.sigma_xi.tolist(),
    }


def reduced_system_from_dict(doc: dict) -> ReducedSystem:
    required = {"slow_ids", "fast_ids", "j_red", "noise_gain", "sigma_slow",
                "sigma_fast", "tau_slow", "tau_fast", "m_slow", "d_slow", "sigma_xi"}
    missing = required - set(doc)
    if missing:
        raise InputError(f"reduced-system JSON missing fields {sorted(missing)}")
    n_s = len(doc["slow_ids"])
    n_f = len(doc["fast_ids"])
    return ReducedSystem(
        slow_ids=tuple(doc["slow_ids"]),
        fast_ids=tuple(doc["fast_ids"]),
        j_red=np.asarray(doc["j_red"], dtype=float).reshape(n_s, n_s),
        noise_gain=np.asarray(doc["noise_gain"], dtype=float).reshape(n_s, n_f),
        sigma_slow=np.asarray(doc["sigma_slow"], dtype=float),
        sigma_fast=np.asarray(doc["sigma_fast"], dtype=float),
        tau_slow=np.asarray(doc["tau_slow"], dtype=float),
        tau_fast=np.asarray(doc["tau_fast"], dtype=float),
        m_slow=np.asarray(doc["m_slow"], dtype=float),
        d_slow=np.asarray(doc["d_slow"], dtype=float),
        sigma_xi=np.asarray(doc["sigma_xi"], dtype=float).reshape(n_s, n_s),
    )
