"""Residual EOFs: fit, scale, and inject the simulation-vs-observation gap.

Per band, a matrix of (simulated - observed) radiance residuals is decomposed
with the SVD; the leading right singular vectors are the empirical orthogonal
functions.  Training radiances are then perturbed by the EOFs scaled with
coefficients drawn from Gaussians fitted to the projections of *held-out*
residuals, so the injected structure matches what the fit never saw.

Rows are mean-centered before the SVD (that makes explained variance
well-defined); the held-out projections are taken on the raw rows, so the
coefficient means carry the systematic part of the gap that lies inside the
EOF subspace.  The three training modes mirror the ablation ladder:
"none" leaves radiances alone, "fixed" adds the mean-coefficient correction
deterministically, "random" draws a fresh coefficient per (sounding, band,
EOF index).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .scenegen import BAND_NAMES, WavelengthGrid
from .util import canonical_json, file_sha256, read_f64, read_u32, write_f64, write_u32

EOF_MAGIC = b"EOF1"
EOF_VERSION = 1

PERTURB_MODES = ("none", "fixed", "random")


@dataclass(frozen=True)
class ResidualMatrix:
    """Rows = soundings, columns = one band's common-grid channels."""

    band: str
    values: np.ndarray

    def __post_init__(self):
        v = self.values
        if v.ndim != 2 or v.shape[0] < 2:
            raise ValueError("residual matrix needs >= 2 sounding rows")
        if not np.all(np.isfinite(v)):
            raise ValueError("residual matrix has non-finite entries")


@dataclass(frozen=True)
class EOFBand:
    band: str
    center: np.ndarray      # (n_ch,) row mean removed before the SVD
    eigvecs: np.ndarray     # (n_ch, k), columns are e_{j,k}
    singvals: np.ndarray    # (k,), non-increasing
    explained: np.ndarray   # (k,) fractions of total centered variance
    coef_mean: np.ndarray   # (k,)
    coef_std: np.ndarray    # (k,)

    @property
    def k(self) -> int:
        return self.eigvecs.shape[1]


@dataclass(frozen=True)
class EOFSet:
    bands: tuple[EOFBand, EOFBand, EOFBand]

    @property
    def n_channels(self) -> int:
        return sum(b.eigvecs.shape[0] for b in self.bands)


def fit_eofs(m: ResidualMatrix, k: int) -> EOFBand:
    """SVD of the mean-centered residual rows; keeps the first k EOFs.

    Coefficient distributions are zeroed; fit them separately from held-out
    projections (fit_coefficient_distribution) and attach with
    with_coefficients.
    """
    n, n_ch = m.values.shape
    if not 1 <= k <= min(n, n_ch):
        raise ValueError(f"k={k} outside 1..min{(n, n_ch)}")
    if not np.any(m.values):
        raise ValueError("residual matrix is identically zero")
    center = m.values.mean(axis=0)
    _, s, vt = np.linalg.svd(m.values - center, full_matrices=False)
    total = float((s * s).sum())
    if total == 0.0:
        raise ValueError("centered residual matrix is identically zero")
    return EOFBand(
        band=m.band,
        center=center,
        eigvecs=vt[:k].T.copy(),
        singvals=s[:k].copy(),
        explained=(s[:k] ** 2 / total),
        coef_mean=np.zeros(k),
        coef_std=np.zeros(k),
    )


def fit_coefficient_distribution(projections: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian (mean, std) per EOF from a (n_samples, k) projection block."""
    p = np.asarray(projections, float)
    if p.ndim == 1:
        p = p[:, None]
    if p.shape[0] < 10:
        raise ValueError(f"need >= 10 projection samples, got {p.shape[0]}")
    return p.mean(axis=0), p.std(axis=0, ddof=1)


def with_coefficients(band: EOFBand, holdout_rows: np.ndarray) -> EOFBand:
    """Attach coefficient Gaussians fitted on raw held-out residual rows."""
    mean, std = fit_coefficient_distribution(holdout_rows @ band.eigvecs)
    return EOFBand(band.band, band.center, band.eigvecs, band.singvals,
                   band.explained, mean, std)


def fit_eof_set(residual_rows: np.ndarray, holdout_rows: np.ndarray,
                grid: WavelengthGrid, k: int = 3) -> EOFSet:
    """Fit all three bands from full-width residual rows (n, n_common)."""
    bands = []
    for name, sl in zip(BAND_NAMES, grid.band_slices()):
        fitted = fit_eofs(ResidualMatrix(name, residual_rows[:, sl]), k)
        bands.append(with_coefficients(fitted, holdout_rows[:, sl]))
    return EOFSet(tuple(bands))


def perturb_radiance(y: np.ndarray, eofs: EOFSet, rng: np.random.Generator,
                     mode: str = "random") -> np.ndarray:
    """One sounding's radiance with the EOF perturbation applied.

    mode "none" returns a copy; "fixed" adds sum_k mean_{j,k} e_{j,k};
    "random" draws c ~ N(mean, std) independently per (band, k).  Callers
    parallelizing across soundings should hand each sounding its own derived
    rng so the draws stay schedule-independent.
    """
    if mode not in PERTURB_MODES:
        raise ValueError(f"unknown perturbation mode {mode!r}")
    y = np.asarray(y, float)
    if y.shape != (eofs.n_channels,):
        raise ValueError(
            f"radiance has shape {y.shape}, EOF set covers ({eofs.n_channels},)"
        )
    out = y.copy()
    if mode == "none":
        return out
    start = 0
    for band in eofs.bands:
        n_ch = band.eigvecs.shape[0]
        if mode == "fixed":
            c = band.coef_mean
        else:
            c = band.coef_mean + band.coef_std * rng.standard_normal(band.k)
        out[start:start + n_ch] += band.eigvecs @ c
        start += n_ch
    return out


# ---------------------------------------------------------------------------
# EOF1 file format (binary + JSON summary sidecar)


def save_eof_set(path, eofs: EOFSet) -> None:
    path = str(path)
    with open(path, "wb") as f:
        f.write(EOF_MAGIC)
        write_u32(f, EOF_VERSION, len(eofs.bands))
        for band in eofs.bands:
            name = band.band.encode("ascii")
            write_u32(f, len(name))
            f.write(name)
            n_ch, k = band.eigvecs.shape
            write_u32(f, n_ch, k)
            write_f64(f, band.center)
            write_f64(f, band.eigvecs)
            write_f64(f, band.singvals)
            write_f64(f, band.explained)
            write_f64(f, band.coef_mean)
            write_f64(f, band.coef_std)
    sidecar = {
        "format": "EOF1",
        "version": EOF_VERSION,
        "bands": [
            {
                "band": b.band,
                "k": b.k,
                "explained_variance": [round(float(v), 6) for v in b.explained],
                "coef_mean": [float(v) for v in b.coef_mean],
                "coef_std": [float(v) for v in b.coef_std],
            }
            for b in eofs.bands
        ],
        "file_hash": file_sha256(path),
    }
    with open(path + ".json", "w") as f:
        f.write(canonical_json(sidecar))


def load_eof_set(path) -> EOFSet:
    path = str(path)
    with open(path + ".json") as f:
        sidecar = json.load(f)
    actual = file_sha256(path)
    if actual != sidecar["file_hash"]:
        raise ValueError(
            f"{path}: content hash {actual[:12]} does not match sidecar "
            f"{sidecar['file_hash'][:12]}"
        )
    with open(path, "rb") as f:
        if f.read(4) != EOF_MAGIC:
            raise ValueError(f"{path}: not an EOF1 file")
        version, n_bands = read_u32(f, 2)
        if version != EOF_VERSION:
            raise ValueError(f"{path}: unsupported EOF version {version}")
        bands = []
        for _ in range(n_bands):
            name = f.read(read_u32(f)).decode("ascii")
            n_ch, k = read_u32(f, 2)
            center = read_f64(f, n_ch)
            eig = read_f64(f, n_ch * k).reshape(n_ch, k)
            sv = read_f64(f, k)
            expl = read_f64(f, k)
            cm = read_f64(f, k)
            cs = read_f64(f, k)
            bands.append(EOFBand(name, center, eig, sv, expl, cm, cs))
        if f.read(1):
            raise ValueError(f"{path}: trailing bytes")
    return EOFSet(tuple(bands))
