"""Exact single-sounding posteriors for the toy forward model, by quadrature.

The retrieval state is (xco2, aerosol, three band albedos).  Conditional on
xco2 and aerosol the radiance is linear in each band's albedo, so the albedo
likelihood profile is sharply peaked and close to Gaussian; a two-pass fixed
point locates the peak and a Gauss-Legendre rule over a clipped +/- 8 sigma
window integrates it, respecting the hard uniform albedo bounds.  Summing the
result over a dense xco2 x aerosol grid with the exponential aerosol prior
gives the marginal that sampling-based retrievals are judged against.

The model radiance is evaluated on each band's fine source grid and then
linearly resampled, exactly like the generated data; exponentiating a
resampled optical depth instead would be off by more than a noise sigma on
the deep narrow lines.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scenegen import (
    Band,
    NoiseModel,
    Optics,
    SceneConfig,
    build_optics,
    make_grid,
    resample_band,
)


@dataclass(frozen=True)
class PosteriorGrid:
    """Normalized marginal pmf over an xco2 grid."""

    x: np.ndarray
    pmf: np.ndarray

    def mean(self) -> float:
        return float((self.x * self.pmf).sum())

    def interval(self, level: float = 0.9) -> tuple[float, float]:
        cdf = np.cumsum(self.pmf)
        lo = 0.5 * (1.0 - level)
        return (
            float(np.interp(lo, cdf, self.x)),
            float(np.interp(1.0 - lo, cdf, self.x)),
        )


class QuadratureError(RuntimeError):
    """The grid choice failed a self-check (mass piled on a boundary)."""


def _band_loglik(y, sig_obs, x_grid, a_grid, band: Band, tau_co2, base, tau_aer,
                 noise, alb_lo, alb_hi, gl_nodes, gl_weights, chunk):
    """log(albedo-marginalized likelihood) for one band, shape (nx, na).

    tau_co2/base/tau_aer live on the band's source grid; the unit-albedo
    radiance is resampled to the common grid before anything touches the
    observation.
    """
    ea = np.exp(-np.outer(a_grid, tau_aer))
    out = np.empty((x_grid.size, a_grid.size))
    for i0 in range(0, x_grid.size, chunk):
        ex = np.exp(-np.outer(x_grid[i0:i0 + chunk], tau_co2))
        m = resample_band(ex[:, None, :] * ea[None, :, :] * base, band)
        s = np.broadcast_to(sig_obs, m.shape)
        for _ in range(2):
            den = (m * m / s**2).sum(-1)
            al = (y * m / s**2).sum(-1) / np.maximum(den, 1e-300)
            s = noise.sigma(np.clip(al, alb_lo, alb_hi)[..., None] * m)
        width = 1.0 / np.sqrt(np.maximum(den, 1e-300))
        lo = np.clip(al - 8.0 * width, alb_lo, alb_hi)
        hi = np.clip(al + 8.0 * width, alb_lo, alb_hi)
        hi = np.maximum(hi, lo + 1e-9)
        nodes = 0.5 * (hi + lo)[..., None] + 0.5 * (hi - lo)[..., None] * gl_nodes
        mm = nodes[..., None] * m[:, :, None, :]
        ss = noise.sigma(mm)
        ll = (-0.5 * ((y - mm) / ss) ** 2 - np.log(ss)).sum(-1)
        peak = ll.max(-1)
        integ = (np.exp(ll - peak[..., None]) * gl_weights).sum(-1) * 0.5 * (hi - lo)
        out[i0:i0 + chunk] = peak + np.log(np.maximum(integ, 1e-300))
    return out


def reference_marginal(
    covariate: np.ndarray,
    cfg: SceneConfig | None = None,
    *,
    nx: int = 241,
    n_aerosol: int = 801,
    aerosol_max: float | None = None,
    n_nodes: int = 32,
    chunk: int = 8,
    optics: Optics | None = None,
) -> PosteriorGrid:
    """Marginal posterior over xco2 for one covariate vector.

    The covariate is the common-grid radiance followed by (sza_deg, psurf),
    exactly as rows of a dataset.  Raises QuadratureError if visible mass
    lands on the top of the aerosol grid, which means aerosol_max was chosen
    too small for this sounding.
    """
    cfg = cfg or SceneConfig()
    grid = make_grid(cfg)
    if covariate.shape != (grid.n_common + 2,):
        raise ValueError(
            f"covariate has shape {covariate.shape}, expected ({grid.n_common + 2},)"
        )
    optics = optics or build_optics(grid)
    y_all = covariate[:-2]
    sza_deg, psurf = covariate[-2], covariate[-1]
    noise = NoiseModel(cfg.noise_floor, cfg.noise_frac)
    alb_lo, alb_hi = cfg.albedo_range
    a_max = cfg.aerosol_max if aerosol_max is None else aerosol_max

    mu = np.cos(np.deg2rad(sza_deg))
    x_grid = np.linspace(*cfg.xco2_range, nx)
    a_grid = np.linspace(0.0, a_max, n_aerosol)
    gl_nodes, gl_weights = np.polynomial.legendre.leggauss(n_nodes)

    logp = (-a_grid / cfg.aerosol_mean)[None, :].repeat(nx, axis=0)
    for j, sl in enumerate(grid.band_slices()):
        y = y_all[sl]
        base = mu * optics.solar[j] * np.exp(-psurf * optics.tau_air[j])
        logp += _band_loglik(
            y, noise.sigma(y), x_grid, a_grid, grid.bands[j],
            optics.tau_co2[j], base, optics.tau_aer[j],
            noise, alb_lo, alb_hi, gl_nodes, gl_weights, chunk,
        )
    joint = np.exp(logp - logp.max())
    edge = joint[:, -1].sum() / joint.sum()
    if edge > 1e-6:
        raise QuadratureError(
            f"{edge:.2e} of posterior mass on the aerosol_max={a_max} boundary"
        )
    pmf = joint.sum(axis=1)
    pmf /= pmf.sum()
    return PosteriorGrid(x_grid, pmf)


def bin_pmf(post: PosteriorGrid, lo: float, hi: float, n_bins: int) -> np.ndarray:
    """Aggregate a grid pmf onto n_bins equal-width bins spanning [lo, hi]."""
    edges = np.linspace(lo, hi, n_bins + 1)
    idx = np.clip(np.searchsorted(edges, post.x, side="right") - 1, 0, n_bins - 1)
    out = np.zeros(n_bins)
    np.add.at(out, idx, post.pmf)
    return out
