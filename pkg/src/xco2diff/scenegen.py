"""Synthetic scene sampling and a three-band Beer-Lambert toy spectrometer.

The toy forward model produces radiances in an O2 reference band plus a weak
and a strong CO2 band.  Absorber optical depths are fixed sums of Gaussian
lines.  The aerosol extinction spectrum deliberately shadows most of the CO2
line structure (scaled by AEROSOL_CO2_COUPLING), so xco2 and aerosol trade
off almost exactly along one direction of scene space; a couple of deep
uncoupled line cores and one aerosol-only line are the only channels that
break the tie, and only at the noise level.  That is what makes retrieval
posteriors on this testbed genuinely multi-modal.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .util import (
    canonical_json,
    config_hash,
    file_sha256,
    read_f64,
    read_u32,
    substream,
    write_f64,
    write_u32,
)

DATASET_MAGIC = b"XCD1"
DATASET_VERSION = 1

BAND_NAMES = ("o2", "wco2", "sco2")

# Aerosol extinction per unit aerosol load: flat part per band plus the
# CO2-shadowing part (see module docstring).
AEROSOL_CO2_COUPLING = 240.0
AEROSOL_FLAT = {"o2": 1.0, "wco2": 0.9, "sco2": 0.8}
AEROSOL_LINE_STRENGTH = 116.0  # the single aerosol-only line in the strong band

# Scene-id offsets keep the per-scene RNG substreams of different splits
# disjoint under one master seed.
SPLIT_ID_OFFSETS = {
    "train": 0,
    "val": 10_000_000,
    "test": 20_000_000,
    "finetune": 30_000_000,
    "pairs": 40_000_000,
    "bench": 50_000_000,
}


class ExtrapolationError(ValueError):
    """Raised when a resampling target falls outside the source span."""


# ---------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class DiscrepancyConfig:
    """Per-band multiplicative + additive spectral distortion (the
    simulation-vs-observation gap surrogate).

    gain_shape "lines" modulates by the normalized absorption line profile
    of the band, "flat" applies a uniform relative gain.  offset_shape
    "tilt" adds a linear-in-wavelength offset, "flat" a constant one.
    """

    gain_mean: float = 0.04
    gain_std: float = 0.01
    gain_shape: str = "lines"
    offset_mean: float = 3.0e-4
    offset_std: float = 1.0e-4
    offset_shape: str = "tilt"


@dataclass(frozen=True)
class SceneConfig:
    xco2_range: tuple[float, float] = (380.0, 440.0)
    albedo_range: tuple[float, float] = (0.05, 0.95)
    aerosol_mean: float = 0.1
    aerosol_max: float = 1.0
    sza_range_deg: tuple[float, float] = (15.0, 70.0)
    psurf_range: tuple[float, float] = (600.0, 1050.0)
    n_source: int = 120
    n_common: int = 32
    noise_floor: float = 1.0e-4
    noise_frac: float = 0.005
    discrepancy: DiscrepancyConfig = field(default_factory=DiscrepancyConfig)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "discrepancy"}
        d = {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
        d["discrepancy"] = {
            k: getattr(self.discrepancy, k) for k in self.discrepancy.__dataclass_fields__
        }
        return d


def scene_config_from_dict(d: dict) -> SceneConfig:
    """Inverse of SceneConfig.to_dict (lists back to tuples)."""
    d = dict(d)
    disc = DiscrepancyConfig(**d.pop("discrepancy", {}))
    d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    return SceneConfig(discrepancy=disc, **d)


# ---------------------------------------------------------------------------
# Scene and grid types


@dataclass(frozen=True)
class Scene:
    xco2: float  # ppm
    albedo: tuple[float, float, float]  # per band, (0, 1]
    aerosol: float  # unitless optical-depth-like load, >= 0
    sza_deg: float
    psurf: float  # hPa


@dataclass(frozen=True)
class Band:
    name: str
    source_wl: np.ndarray  # micron, fine instrument grid
    common_wl: np.ndarray  # micron, shared retrieval grid


@dataclass(frozen=True)
class WavelengthGrid:
    bands: tuple[Band, Band, Band]

    @property
    def n_common(self) -> int:
        return sum(b.common_wl.size for b in self.bands)

    def band_slices(self) -> list[slice]:
        out, start = [], 0
        for b in self.bands:
            out.append(slice(start, start + b.common_wl.size))
            start += b.common_wl.size
        return out


@dataclass(frozen=True)
class NoiseModel:
    floor: float
    frac: float

    def sigma(self, signal: np.ndarray) -> np.ndarray:
        return self.floor + self.frac * np.abs(signal)


_BAND_SPANS = {"o2": (0.7580, 0.7720), "wco2": (1.5950, 1.6180), "sco2": (2.0450, 2.0750)}


def make_grid(cfg: SceneConfig) -> WavelengthGrid:
    bands = []
    for name in BAND_NAMES:
        lo, hi = _BAND_SPANS[name]
        source = np.linspace(lo, hi, cfg.n_source)
        # common grid strictly inside the source span so interpolation never
        # extrapolates
        inset = 2.0 * (hi - lo) / (cfg.n_source - 1)
        common = np.linspace(lo + inset, hi - inset, cfg.n_common)
        bands.append(Band(name, source, common))
    return WavelengthGrid(tuple(bands))


# ---------------------------------------------------------------------------
# Fixed spectroscopy.  Line positions are indexed on the 32-point common grid
# of the default config and converted to wavelengths, so the designed channel
# structure survives grid-size changes.

# (band, common-grid index at n_common=32, amplitude, width_um)
_CO2_COUPLED_LINES = [
    ("wco2", 7, 1.5e-3, 1.3e-3),
    ("wco2", 14, 2.8e-3, 1.6e-3),
    ("wco2", 21, 2.2e-3, 1.3e-3),
    ("wco2", 26, 1.2e-3, 1.0e-3),
    ("sco2", 4, 5.0e-3, 1.6e-3),
    ("sco2", 9, 9.0e-3, 2.0e-3),
    ("sco2", 14, 1.3e-2, 2.0e-3),
    ("sco2", 24, 6.5e-3, 1.6e-3),
]
# Deep narrow cores NOT shadowed by the aerosol spectrum; these are the
# channels whose darkness carries xco2 information along the trade direction.
_CO2_CORE_LINES = [
    ("wco2", 17, 1.80e-2, 2.0e-4),
    ("wco2", 24, 1.80e-2, 2.0e-4),
    ("sco2", 16, 1.02e-2, 2.5e-4),
    ("sco2", 18, 1.60e-2, 2.5e-4),
    ("sco2", 20, 1.90e-2, 2.5e-4),
    ("sco2", 22, 1.59e-2, 2.5e-4),
]
_AIR_LINES = [
    ("o2", 6, 1.2e-3, 1.2e-3),
    ("o2", 13, 2.2e-3, 1.5e-3),
    ("o2", 19, 1.6e-3, 1.2e-3),
    ("o2", 26, 2.5e-3, 1.5e-3),
    ("wco2", 10, 2.0e-4, 1.5e-3),
    ("sco2", 6, 2.5e-4, 1.8e-3),
]
_AIR_BASE = {"o2": 2.0e-4, "wco2": 1.2e-4, "sco2": 1.5e-4}
# common-grid index of the aerosol-only line in the strong band
_AEROSOL_LINE_INDEX = 29


def _line_profile(wl: np.ndarray, center: float, width: float) -> np.ndarray:
    return np.exp(-0.5 * ((wl - center) / width) ** 2)


def _index_to_wl(band_name: str, index: int) -> float:
    lo, hi = _BAND_SPANS[band_name]
    inset = 2.0 * (hi - lo) / 119.0  # default source resolution anchors positions
    return float(np.linspace(lo + inset, hi - inset, 32)[index])


@dataclass(frozen=True)
class Optics:
    """Per-band optical depth tables on the source grids plus solar envelope."""

    grid: WavelengthGrid
    tau_co2: tuple[np.ndarray, ...]  # full CO2 depth per ppm
    tau_co2_core: tuple[np.ndarray, ...]  # the uncoupled part of tau_co2
    tau_air: tuple[np.ndarray, ...]  # per hPa
    tau_aer: tuple[np.ndarray, ...]  # per unit aerosol
    solar: tuple[np.ndarray, ...]


def _solar_envelope(wl: np.ndarray) -> np.ndarray:
    return 0.3 + 1.2 * np.exp(-(((wl - 1.3) / 1.1) ** 2))


def build_optics(grid: WavelengthGrid) -> Optics:
    tau_co2, tau_core, tau_air, tau_aer, solar = [], [], [], [], []
    for band in grid.bands:
        wl = band.source_wl
        coupled = np.zeros_like(wl)
        core = np.zeros_like(wl)
        air = np.full_like(wl, _AIR_BASE[band.name])
        for name, idx, amp, width in _CO2_COUPLED_LINES:
            if name == band.name:
                coupled += amp * _line_profile(wl, _index_to_wl(name, idx), width)
        for name, idx, amp, width in _CO2_CORE_LINES:
            if name == band.name:
                core += amp * _line_profile(wl, _index_to_wl(name, idx), width)
        for name, idx, amp, width in _AIR_LINES:
            if name == band.name:
                air += amp * _line_profile(wl, _index_to_wl(name, idx), width)
        aer = np.full_like(wl, AEROSOL_FLAT[band.name])
        aer += AEROSOL_CO2_COUPLING * coupled
        if band.name == "sco2":
            aer += AEROSOL_LINE_STRENGTH * _line_profile(
                wl, _index_to_wl("sco2", _AEROSOL_LINE_INDEX), 2.0e-4
            )
        tau_co2.append(coupled + core)
        tau_core.append(core)
        tau_air.append(air)
        tau_aer.append(aer)
        solar.append(_solar_envelope(wl))
    return Optics(grid, tuple(tau_co2), tuple(tau_core), tuple(tau_air), tuple(tau_aer), tuple(solar))


# ---------------------------------------------------------------------------
# Forward model


def toy_forward(scene: Scene, optics: Optics) -> list[np.ndarray]:
    """Noiseless per-band radiance on the source grids."""
    mu = np.cos(np.deg2rad(scene.sza_deg))
    out = []
    for j in range(3):
        depth = (
            scene.xco2 * optics.tau_co2[j]
            + scene.psurf * optics.tau_air[j]
            + scene.aerosol * optics.tau_aer[j]
        )
        out.append(scene.albedo[j] * mu * optics.solar[j] * np.exp(-depth))
    return out


def toy_forward_many(
    xco2: np.ndarray,
    albedo: np.ndarray,
    aerosol: np.ndarray,
    sza_deg: np.ndarray,
    psurf: np.ndarray,
    optics: Optics,
) -> np.ndarray:
    """Vectorized forward + resample: (n_scenes, n_common) common-grid radiance.

    albedo has shape (n, 3); the rest are (n,).
    """
    mu = np.cos(np.deg2rad(np.asarray(sza_deg, dtype=float)))
    xco2 = np.asarray(xco2, dtype=float)
    aerosol = np.asarray(aerosol, dtype=float)
    psurf = np.asarray(psurf, dtype=float)
    albedo = np.asarray(albedo, dtype=float)
    cols = []
    for j in range(3):
        depth = (
            xco2[:, None] * optics.tau_co2[j][None, :]
            + psurf[:, None] * optics.tau_air[j][None, :]
            + aerosol[:, None] * optics.tau_aer[j][None, :]
        )
        rad = (albedo[:, j] * mu)[:, None] * optics.solar[j][None, :] * np.exp(-depth)
        cols.append(resample_band(rad, optics.grid.bands[j]))
    return np.concatenate(cols, axis=1)


def _interp_weights(band: Band):
    idx = np.searchsorted(band.source_wl, band.common_wl, side="right") - 1
    idx = np.clip(idx, 0, band.source_wl.size - 2)
    w = (band.common_wl - band.source_wl[idx]) / (band.source_wl[idx + 1] - band.source_wl[idx])
    return idx, w


def resample_band(values: np.ndarray, band: Band) -> np.ndarray:
    """Linear resampling of source-grid values (last axis) onto the band's
    common grid.  Retrieval forward models must resample *radiance*, not
    optical depth, to stay consistent with the generated data."""
    if values.shape[-1] != band.source_wl.size:
        raise ValueError(
            f"band {band.name}: last axis is {values.shape[-1]}, "
            f"source grid {band.source_wl.size}"
        )
    idx, w = _interp_weights(band)
    return values[..., idx] * (1.0 - w) + values[..., idx + 1] * w


def resample_to_common_grid(radiance: list[np.ndarray], grid: WavelengthGrid) -> np.ndarray:
    """Linear interpolation of per-band source radiance onto the common grid,
    concatenated in band order.  Raises if a common wavelength lies outside
    the source span."""
    parts = []
    for rad, band in zip(radiance, grid.bands):
        if rad.shape != band.source_wl.shape:
            raise ValueError(
                f"band {band.name}: radiance has {rad.shape}, source grid {band.source_wl.shape}"
            )
        if band.common_wl[0] < band.source_wl[0] or band.common_wl[-1] > band.source_wl[-1]:
            raise ExtrapolationError(
                f"band {band.name}: common grid extends beyond source span"
            )
        parts.append(resample_band(rad, band))
    return np.concatenate(parts)


def add_noise(radiance: np.ndarray, noise: NoiseModel, rng: np.random.Generator):
    """Heteroscedastic Gaussian noise; returns (noisy, sigma)."""
    sigma = noise.sigma(radiance)
    return radiance + sigma * rng.standard_normal(radiance.shape), sigma


# ---------------------------------------------------------------------------
# Scene sampling


def sample_scene(cfg: SceneConfig, rng: np.random.Generator) -> Scene:
    """Draw one scene; field order is fixed for reproducibility."""
    xco2 = rng.uniform(*cfg.xco2_range)
    albedo = tuple(rng.uniform(*cfg.albedo_range) for _ in range(3))
    aerosol = rng.exponential(cfg.aerosol_mean)
    while aerosol > cfg.aerosol_max:
        aerosol = rng.exponential(cfg.aerosol_mean)
    sza = rng.uniform(*cfg.sza_range_deg)
    psurf = rng.uniform(*cfg.psurf_range)
    return Scene(float(xco2), albedo, float(aerosol), float(sza), float(psurf))


def degenerate_twin(scene: Scene, delta_xco2: float) -> Scene | None:
    """The scene whose radiance is nearly identical with xco2 shifted up.

    Moves along the designed xco2/aerosol trade direction, compensating the
    flat aerosol extinction with the band albedos.  Returns None when the
    twin leaves physical bounds (aerosol < 0 or albedo outside (0, 1]).
    """
    beta = AEROSOL_CO2_COUPLING
    aerosol = scene.aerosol - delta_xco2 / beta
    if aerosol < 0.0:
        return None
    albedo = tuple(
        a * np.exp(-delta_xco2 * AEROSOL_FLAT[name] / beta)
        for a, name in zip(scene.albedo, BAND_NAMES)
    )
    if any(not 0.0 < a <= 1.0 for a in albedo):
        return None
    return replace(scene, xco2=scene.xco2 + delta_xco2, albedo=albedo, aerosol=aerosol)


# ---------------------------------------------------------------------------
# Discrepancy (simulation-vs-observation surrogate)


def _discrepancy_shapes(optics: Optics) -> tuple[np.ndarray, np.ndarray]:
    """Returns (gain line shape, offset tilt shape), each (n_common,)."""
    grid = optics.grid
    gain = np.zeros(grid.n_common)
    tilt = np.zeros(grid.n_common)
    for j, sl in enumerate(grid.band_slices()):
        band = grid.bands[j]
        absorber = optics.tau_co2[j] if band.name != "o2" else optics.tau_air[j]
        idx, w = _interp_weights(band)
        prof = absorber[idx] * (1.0 - w) + absorber[idx + 1] * w
        peak = prof.max()
        gain[sl] = prof / peak if peak > 0 else 0.0
        tilt[sl] = np.linspace(-1.0, 1.0, band.common_wl.size)
    return gain, tilt


def apply_discrepancy(
    radiance: np.ndarray,
    optics: Optics,
    dcfg: DiscrepancyConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """Distort one common-grid radiance vector: per band,
    y' = y * (1 + c_gain * shape) + c_off * shape."""
    gain_shape, tilt_shape = _discrepancy_shapes(optics)
    out = radiance.copy()
    for sl in optics.grid.band_slices():
        c_gain = rng.normal(dcfg.gain_mean, dcfg.gain_std)
        c_off = rng.normal(dcfg.offset_mean, dcfg.offset_std)
        g = gain_shape[sl] if dcfg.gain_shape == "lines" else 1.0
        t = tilt_shape[sl] if dcfg.offset_shape == "tilt" else 1.0
        out[sl] = out[sl] * (1.0 + c_gain * g) + c_off * t
    return out


# ---------------------------------------------------------------------------
# Datasets


@dataclass
class Dataset:
    covariates: np.ndarray  # (n, n_features): radiance channels + sza + psurf
    labels: np.ndarray  # (n,) xco2 ppm
    scene_ids: np.ndarray  # (n,) int64
    split: str
    grid: WavelengthGrid
    norm_mean: np.ndarray  # per-feature, over this dataset
    norm_std: np.ndarray
    seed: int
    config_echo: dict

    @property
    def n(self) -> int:
        return self.labels.size

    @property
    def n_features(self) -> int:
        return self.covariates.shape[1]

    def config_hash(self) -> str:
        return config_hash(self.config_echo)


def normalize(values: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return (values - mean) / std


def denormalize(values: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return values * std + mean


def _norm_stats(covariates: np.ndarray):
    mean = covariates.mean(axis=0)
    std = covariates.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)  # constant features pass through
    return mean, std


def scene_fields(scenes: list[Scene]):
    return (
        np.array([s.xco2 for s in scenes]),
        np.array([s.albedo for s in scenes]),
        np.array([s.aerosol for s in scenes]),
        np.array([s.sza_deg for s in scenes]),
        np.array([s.psurf for s in scenes]),
    )


def build_dataset(
    cfg: SceneConfig,
    n: int,
    split: str,
    seed: int,
    *,
    distorted: bool = False,
) -> Dataset:
    """Sample n scenes and assemble covariate/label pairs.

    Each scene's draws come from substreams keyed by (seed, scene id), so the
    dataset bytes depend only on (cfg, n, split, seed, distorted).  distorted
    applies the configured discrepancy before noise, which is how the
    observation-world splits (test, finetune) are produced.
    """
    if split not in SPLIT_ID_OFFSETS:
        raise ValueError(f"unknown split {split!r}")
    grid = make_grid(cfg)
    optics = build_optics(grid)
    noise = NoiseModel(cfg.noise_floor, cfg.noise_frac)
    offset = SPLIT_ID_OFFSETS[split]

    ids = np.arange(offset, offset + n, dtype=np.int64)
    scenes = [sample_scene(cfg, substream(seed, "scene", i)) for i in ids]
    clean = toy_forward_many(*scene_fields(scenes), optics)
    covs = np.empty((n, grid.n_common + 2))
    for k, (i, scene) in enumerate(zip(ids, scenes)):
        rad = clean[k]
        if distorted:
            rad = apply_discrepancy(rad, optics, cfg.discrepancy, substream(seed, "discrepancy", i))
        noisy, _ = add_noise(rad, noise, substream(seed, "noise", i))
        covs[k, :-2] = noisy
        covs[k, -2] = scene.sza_deg
        covs[k, -1] = scene.psurf
    labels = np.array([s.xco2 for s in scenes])
    mean, std = _norm_stats(covs)
    echo = dict(cfg.to_dict(), split=split, n=n, seed=seed, distorted=distorted)
    return Dataset(covs, labels, ids, split, grid, mean, std, seed, echo)


def build_finetune_set(cfg: SceneConfig, n: int, seed: int) -> Dataset:
    """Observation-world calibration pairs: distorted covariates, true labels."""
    return build_dataset(cfg, n, "finetune", seed, distorted=True)


def build_residual_pairs(cfg: SceneConfig, n: int, seed: int):
    """Noiseless paired (simulated, observed) radiances for residual fitting.

    Returns (sim, obs, scene_ids), each radiance (n, n_common).  The pair
    shares scenes; obs applies the configured discrepancy, so sim - obs
    isolates the systematic distortion the residual decomposition should
    capture.
    """
    grid = make_grid(cfg)
    optics = build_optics(grid)
    offset = SPLIT_ID_OFFSETS["pairs"]
    ids = np.arange(offset, offset + n, dtype=np.int64)
    scenes = [sample_scene(cfg, substream(seed, "scene", i)) for i in ids]
    sim = toy_forward_many(*scene_fields(scenes), optics)
    obs = np.empty_like(sim)
    for k, i in enumerate(ids):
        obs[k] = apply_discrepancy(sim[k], optics, cfg.discrepancy, substream(seed, "discrepancy", i))
    return sim, obs, ids


def find_degenerate_pair(
    cfg: SceneConfig,
    seed: int,
    *,
    min_delta_xco2: float = 5.0,
    max_tries: int = 2000,
) -> tuple[Scene, Scene] | None:
    """Randomized search for two scenes whose xco2 differ by at least
    min_delta_xco2 ppm while every noiseless channel differs by under one
    noise sigma."""
    grid = make_grid(cfg)
    optics = build_optics(grid)
    noise = NoiseModel(cfg.noise_floor, cfg.noise_frac)
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        scene = sample_scene(cfg, rng)
        delta = rng.uniform(min_delta_xco2, 3.0 * min_delta_xco2)
        twin = degenerate_twin(scene, delta)
        if twin is None:
            continue
        ya = resample_to_common_grid(toy_forward(scene, optics), grid)
        yb = resample_to_common_grid(toy_forward(twin, optics), grid)
        if np.all(np.abs(ya - yb) < noise.sigma(ya)):
            return scene, twin
    return None


# ---------------------------------------------------------------------------
# Ambiguity benchmark sounding
#
# A scene pinned in the shadowed corner of state space: bright o2 albedo (so
# the albedo bound walls off the low-xco2 end of the trade direction), an
# aerosol load that leaves the aerosol-only line one to three sigma above the
# noise floor, and a searched noise draw that pulls the core channels bright
# together.  The exact posterior for this sounding has two well-separated
# maxima, which makes it the regression target for multimodal sampling.

AMBIGUOUS_SCENE = Scene(
    xco2=404.0, albedo=(0.885, 0.85, 0.88), aerosol=0.085, sza_deg=35.0, psurf=870.0
)
AMBIGUOUS_NOISE_INDEX = 3071
AMBIGUOUS_MASTER_SEED = 9000


def ambiguous_sounding(cfg: SceneConfig | None = None) -> tuple[np.ndarray, Scene]:
    """Covariate vector for the frozen two-mode benchmark sounding."""
    cfg = cfg or SceneConfig()
    grid = make_grid(cfg)
    optics = build_optics(grid)
    noise = NoiseModel(cfg.noise_floor, cfg.noise_frac)
    clean = resample_to_common_grid(toy_forward(AMBIGUOUS_SCENE, optics), grid)
    rng = substream(AMBIGUOUS_MASTER_SEED, "noise", AMBIGUOUS_NOISE_INDEX)
    noisy, _ = add_noise(clean, noise, rng)
    cov = np.concatenate([noisy, [AMBIGUOUS_SCENE.sza_deg, AMBIGUOUS_SCENE.psurf]])
    return cov, AMBIGUOUS_SCENE


# ---------------------------------------------------------------------------
# Dataset file format (XCD1 + JSON sidecar)


def save_dataset(path, ds: Dataset) -> None:
    path = str(path)
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        write_u32(f, DATASET_VERSION, ds.n, ds.n_features, len(ds.grid.bands))
        for band in ds.grid.bands:
            name = band.name.encode("ascii")
            write_u32(f, len(name))
            f.write(name)
            write_u32(f, band.source_wl.size, band.common_wl.size)
            write_f64(f, band.source_wl)
            write_f64(f, band.common_wl)
        for k in range(ds.n):
            write_f64(f, np.array([float(ds.scene_ids[k]), ds.labels[k]]))
            write_f64(f, ds.covariates[k])
    sidecar = {
        "format": "XCD1",
        "version": DATASET_VERSION,
        "split": ds.split,
        "n": ds.n,
        "n_features": ds.n_features,
        "seed": ds.seed,
        "config": ds.config_echo,
        "config_hash": ds.config_hash(),
        "normalization": {"mean": ds.norm_mean.tolist(), "std": ds.norm_std.tolist()},
        "dataset_hash": file_sha256(path),
    }
    with open(path + ".json", "w") as f:
        f.write(canonical_json(sidecar))


def load_dataset(path) -> Dataset:
    path = str(path)
    with open(path + ".json") as f:
        sidecar = json.load(f)
    actual = file_sha256(path)
    if actual != sidecar["dataset_hash"]:
        raise ValueError(
            f"{path}: content hash {actual[:12]} does not match sidecar "
            f"{sidecar['dataset_hash'][:12]}"
        )
    with open(path, "rb") as f:
        if f.read(4) != DATASET_MAGIC:
            raise ValueError(f"{path}: not an XCD1 dataset")
        version, n, n_features, n_bands = read_u32(f, 4)
        if version != DATASET_VERSION:
            raise ValueError(f"{path}: unsupported dataset version {version}")
        bands = []
        for _ in range(n_bands):
            name_len = read_u32(f)
            name = f.read(name_len).decode("ascii")
            n_src, n_com = read_u32(f, 2)
            source = read_f64(f, n_src)
            common = read_f64(f, n_com)
            bands.append(Band(name, source, common))
        covs = np.empty((n, n_features))
        labels = np.empty(n)
        ids = np.empty(n, dtype=np.int64)
        for k in range(n):
            head = read_f64(f, 2)
            ids[k] = int(head[0])
            labels[k] = head[1]
            covs[k] = read_f64(f, n_features)
        if f.read(1):
            raise ValueError(f"{path}: trailing bytes")
    norm = sidecar["normalization"]
    return Dataset(
        covs,
        labels,
        ids,
        sidecar["split"],
        WavelengthGrid(tuple(bands)),
        np.array(norm["mean"]),
        np.array(norm["std"]),
        int(sidecar["seed"]),
        sidecar["config"],
    )
