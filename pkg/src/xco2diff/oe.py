"""Optimal-estimation baseline: Gaussian MAP retrieval with damped Gauss-Newton.

Minimizes J(x) = (y - F(x))' R^-1 (y - F(x)) + (x - x_a)' B^-1 (x - x_a)
with Levenberg-Marquardt damping and reports the analytic posterior
covariance (K' R^-1 K + B^-1)^-1 at the solution.  All solves go through
Cholesky factorizations; a matrix that fails to factor raises
SingularMatrixError instead of silently falling back to a pseudo-inverse.

The toy retrieval state is (xco2, three band albedos, aerosol); solar zenith
and surface pressure ride along as known forward-model parameters, matching
their covariate role everywhere else in the package.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .scenegen import Optics, SceneConfig, build_optics, make_grid, resample_band

STATE_NAMES = ("xco2", "albedo_o2", "albedo_wco2", "albedo_sco2", "aerosol")


class SingularMatrixError(RuntimeError):
    """A covariance or normal-equation matrix is not positive definite."""


def _chol(mat: np.ndarray, name: str) -> np.ndarray:
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError(f"{name} is not positive definite") from exc


def _spd_solve(mat: np.ndarray, rhs: np.ndarray, name: str) -> np.ndarray:
    fac = _chol(mat, name)
    return np.linalg.solve(fac.T, np.linalg.solve(fac, rhs))


def _spd_inverse(mat: np.ndarray, name: str) -> np.ndarray:
    inv_fac = np.linalg.inv(_chol(mat, name))
    return inv_fac.T @ inv_fac


@dataclass(frozen=True)
class OEPrior:
    """Gaussian prior N(x_a, B)."""

    x_a: np.ndarray
    B: np.ndarray


@dataclass(frozen=True)
class ForwardModelHandle:
    """F(x) plus an optional analytic Jacobian; `jac=None` means finite
    differences."""

    forward: Callable[[np.ndarray], np.ndarray]
    jac: Callable[[np.ndarray], np.ndarray] | None = None


@dataclass(frozen=True)
class OEOptions:
    max_iters: int = 50
    lam0: float = 1.0e-3
    tol: float = 1.0e-8


@dataclass
class OEResult:
    x_hat: np.ndarray
    S_hat: np.ndarray
    converged: bool
    iterations: int
    cost_trace: list[float] = field(default_factory=list)


def cost_J(x, y, fm: ForwardModelHandle, R, prior: OEPrior) -> float:
    """Appendix-style quadratic cost; always >= 0."""
    r = np.asarray(y, float) - fm.forward(np.asarray(x, float))
    d = np.asarray(x, float) - prior.x_a
    return float(r @ _spd_solve(R, r, "R") + d @ _spd_solve(prior.B, d, "B"))


def jacobian(fm: ForwardModelHandle, x: np.ndarray) -> np.ndarray:
    """Analytic Jacobian when the handle provides one, else central
    differences with h_j = 1e-6 * max(|x_j|, 1)."""
    x = np.asarray(x, float)
    if fm.jac is not None:
        K = np.asarray(fm.jac(x), float)
    else:
        cols = []
        with np.errstate(invalid="ignore", over="ignore"):
            for j in range(x.size):
                h = 1.0e-6 * max(abs(x[j]), 1.0)
                up, dn = x.copy(), x.copy()
                up[j] += h
                dn[j] -= h
                cols.append((fm.forward(up) - fm.forward(dn)) / (2.0 * h))
        K = np.stack(cols, axis=1)
    if not np.all(np.isfinite(K)):
        raise ValueError("Jacobian has non-finite entries")
    return K


def posterior_covariance(K, R, B) -> np.ndarray:
    """(K' R^-1 K + B^-1)^-1, symmetrized after inversion."""
    K = np.asarray(K, float)
    A = K.T @ _spd_solve(R, K, "R") + _spd_inverse(B, "B")
    S = _spd_inverse(A, "normal matrix")
    return 0.5 * (S + S.T)


def solve_map(y, fm: ForwardModelHandle, R, prior: OEPrior,
              options: OEOptions | None = None) -> OEResult:
    """Levenberg-Marquardt MAP solve.

    Accepted steps never increase the cost; the damping grows x10 when a
    proposal is rejected and shrinks x10 on acceptance.  Convergence is
    |dJ| < tol * (1 + J) across an accepted step.  Exhausting max_iters
    returns converged=False rather than pretending.
    """
    opt = options or OEOptions()
    y = np.asarray(y, float)
    x = np.asarray(prior.x_a, float).copy()
    n = x.size
    Rinv_chol = _chol(np.asarray(R, float), "R")  # fail fast, reuse below
    Binv = _spd_inverse(prior.B, "B")

    def rsolve(v):
        return np.linalg.solve(Rinv_chol.T, np.linalg.solve(Rinv_chol, v))

    J = cost_J(x, y, fm, R, prior)
    trace = [J]
    lam = opt.lam0
    converged = False
    iterations = 0
    for iterations in range(1, opt.max_iters + 1):
        K = jacobian(fm, x)
        r = y - fm.forward(x)
        grad = K.T @ rsolve(r) - Binv @ (x - prior.x_a)
        H = K.T @ rsolve(K) + Binv
        accepted = False
        while not accepted:
            step = _spd_solve(H + lam * np.eye(n), grad, "damped normal matrix")
            J_new = cost_J(x + step, y, fm, R, prior)
            if J_new <= J:
                accepted = True
            else:
                lam *= 10.0
                if lam > 1.0e15:
                    S = posterior_covariance(K, R, prior.B)
                    return OEResult(x, S, False, iterations, trace)
        x = x + step
        lam /= 10.0
        trace.append(J_new)
        if abs(J - J_new) < opt.tol * (1.0 + J_new):
            J = J_new
            converged = True
            break
        J = J_new
    S = posterior_covariance(jacobian(fm, x), R, prior.B)
    return OEResult(x, S, converged, iterations, trace)


# ---------------------------------------------------------------------------
# Toy forward-model handle


def toy_forward_handle(sza_deg: float, psurf: float,
                       cfg: SceneConfig | None = None,
                       optics: Optics | None = None) -> ForwardModelHandle:
    """Handle over the synthetic spectrometer for one known (sza, psurf).

    State layout follows STATE_NAMES.  Radiance and all Jacobian columns are
    evaluated on the fine source grids and then resampled, the same path the
    generated data takes; resampling is linear, so the analytic Jacobian
    commutes with it exactly.
    """
    cfg = cfg or SceneConfig()
    grid = make_grid(cfg)
    optics = optics or build_optics(grid)
    mu = float(np.cos(np.deg2rad(sza_deg)))
    bases = [mu * optics.solar[j] * np.exp(-psurf * optics.tau_air[j])
             for j in range(3)]

    def band_unit(x: np.ndarray, j: int) -> np.ndarray:
        """Source-grid radiance for unit albedo."""
        depth = x[0] * optics.tau_co2[j] + x[4] * optics.tau_aer[j]
        return bases[j] * np.exp(-depth)

    def forward(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, float)
        return np.concatenate([
            resample_band(x[1 + j] * band_unit(x, j), grid.bands[j])
            for j in range(3)
        ])

    def jac(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, float)
        K = np.zeros((sum(b.common_wl.size for b in grid.bands), 5))
        start = 0
        for j in range(3):
            band = grid.bands[j]
            unit = band_unit(x, j)
            src = x[1 + j] * unit
            stop = start + band.common_wl.size
            K[start:stop, 0] = resample_band(-optics.tau_co2[j] * src, band)
            K[start:stop, 1 + j] = resample_band(unit, band)
            K[start:stop, 4] = resample_band(-optics.tau_aer[j] * src, band)
            start = stop
        return K

    return ForwardModelHandle(forward, jac)
