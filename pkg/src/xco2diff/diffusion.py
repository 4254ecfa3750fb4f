"""Conditional diffusion sampler for per-sounding XCO2 posteriors.

The chain runs in standardized label space and is shifted toward a
per-sounding prior mean: the forward kernel interpolates between the clean
label and the prior as noise accumulates, so the terminal distribution is
N(prior, 1) rather than N(0, 1), and the reverse step carries a matching
prior term.  A small dense network predicts the injected noise from the
radiance features, the prior value, the current iterate, and a sinusoidal
embedding of the timestep.  With the scan featurizer the prediction is
anchored to the closed-form noise estimate of the Gaussian posterior
implied by the fit landscape, and the network learns the correction.
Setting the prior to zero collapses every formula to the plain DDPM chain.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import ndnet
from .ndnet import CheckpointError, Dense, NetworkSpec
from .priors import (
    PriorModel,
    TrainingDivergenceError,
    covariate_features,
    feature_stats,
    predict_prior_batch,
)
from .scenegen import (
    Dataset,
    SceneConfig,
    build_optics,
    make_grid,
    normalize,
    resample_band,
    scene_config_from_dict,
)
from .sim2real import EOFSet, PERTURB_MODES, perturb_radiance
from .util import canonical_json, file_sha256, substream

DESCRIPTOR_VERSION = 1

FEATURIZERS = ("radiance", "scan", "identity")

SCAN_POINTS = 13  # candidate XCO2 values across the plausible range
SCAN_ITERS = 5  # damped Gauss-Newton steps per candidate
SCAN_FEATURES = 2 * SCAN_POINTS + 1
SCAN_SCALE_FLOOR = 1.0  # ppm; the scan grid cannot localize below its spacing


# ---------------------------------------------------------------------------
# Schedule


@dataclass(frozen=True)
class DiffusionSchedule:
    """Cosine noise schedule with precomputed reverse-step coefficients.

    Arrays are indexed by timestep t in 1..T; slot 0 holds the conventions
    alpha_bar[0] = 1 and beta[0] = 0 so that t-1 lookups stay in bounds.
    """

    T: int
    s_offset: float
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    gamma0: np.ndarray
    gamma1: np.ndarray
    gamma2: np.ndarray
    beta_tilde: np.ndarray

    def check_t(self, t) -> np.ndarray:
        t = np.asarray(t)
        if not np.issubdtype(t.dtype, np.integer):
            raise ValueError("timestep t must be integer")
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"timestep {t} outside 1..{self.T}")
        return t


def build_cosine_schedule(T: int = 50, s_offset: float = 0.008) -> DiffusionSchedule:
    """Squared-cosine noise profile; betas clipped, alpha-bar re-accumulated.

    alpha_bar targets f(t)/f(0) with f(t) = cos^2(((t/T + s)/(1+s)) * pi/2).
    The per-step betas come from the ratio of consecutive targets, are
    clipped to [1e-6, 0.999], and alpha_bar is then recomputed as the
    running product of (1 - beta) so the stored arrays stay exactly
    self-consistent (the clip matters only at t = T where the raw target
    hits zero).
    """
    if T < 2:
        raise ValueError("schedule needs T >= 2")
    if s_offset <= 0:
        raise ValueError("s_offset must be > 0")
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos(((t / T + s_offset) / (1.0 + s_offset)) * (np.pi / 2.0)) ** 2
    target = f / f[0]
    beta = np.zeros(T + 1)
    beta[1:] = np.clip(1.0 - target[1:] / target[:-1], 1e-6, 0.999)
    alpha = 1.0 - beta
    alpha[0] = 1.0
    alpha_bar = np.cumprod(alpha)

    ab, ab_prev = alpha_bar[1:], alpha_bar[:-1]
    sqrt_ab, sqrt_a = np.sqrt(ab), np.sqrt(alpha[1:])
    gamma0 = np.zeros(T + 1)
    gamma1 = np.zeros(T + 1)
    gamma2 = np.zeros(T + 1)
    beta_tilde = np.zeros(T + 1)
    gamma0[1:] = beta[1:] * np.sqrt(ab_prev) / (1.0 - ab)
    gamma1[1:] = (1.0 - ab_prev) * sqrt_a / (1.0 - ab)
    gamma2[1:] = 1.0 + (sqrt_ab - 1.0) * (sqrt_a + np.sqrt(ab_prev)) / (1.0 - ab)
    beta_tilde[1:] = (1.0 - ab_prev) * beta[1:] / (1.0 - ab)
    return DiffusionSchedule(
        T, s_offset, beta, alpha, alpha_bar, gamma0, gamma1, gamma2, beta_tilde
    )


# ---------------------------------------------------------------------------
# Label standardization


@dataclass(frozen=True)
class LabelStandardizer:
    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise ValueError("label std must be positive")

    @classmethod
    def from_labels(cls, labels: np.ndarray) -> "LabelStandardizer":
        std = float(np.std(labels))
        return cls(float(np.mean(labels)), std if std > 0 else 1.0)

    def standardize(self, ppm):
        return (np.asarray(ppm, dtype=np.float64) - self.mean) / self.std

    def destandardize(self, z):
        return np.asarray(z, dtype=np.float64) * self.std + self.mean


# ---------------------------------------------------------------------------
# Forward / reverse kernels


def forward_noise(x0_std, x_prior_std, t, schedule: DiffusionSchedule, rng):
    """Noising kernel: returns (x_t, eps) with eps ~ N(0, I).

    x_t = sqrt(ab_t) x0 + (1 - sqrt(ab_t)) x_prior + sqrt(1 - ab_t) eps,
    which interpolates the mean from x0 at ab=1 to x_prior at ab=0.
    t may be a scalar or an array broadcasting against x0.
    """
    t = schedule.check_t(t)
    x0 = np.asarray(x0_std, dtype=np.float64)
    ab = schedule.alpha_bar[t]
    eps = rng.standard_normal(x0.shape)
    x_t = np.sqrt(ab) * x0 + (1.0 - np.sqrt(ab)) * x_prior_std + np.sqrt(1.0 - ab) * eps
    return x_t, eps


def reconstruct_x0(x_t, t, eps, x_prior_std, schedule: DiffusionSchedule):
    """Invert forward_noise given the noise: exact when eps is the true draw."""
    t = schedule.check_t(t)
    ab = schedule.alpha_bar[t]
    sqrt_ab = np.sqrt(ab)
    return (x_t - (1.0 - sqrt_ab) * x_prior_std - np.sqrt(1.0 - ab) * eps) / sqrt_ab


def reverse_step(x_t, t, eps_hat, x_prior_std, schedule: DiffusionSchedule, rng=None, *, z=None):
    """One posterior step t -> t-1 in standardized space.

    The predicted x0 and the prior enter through the gamma coefficients
    (which sum to one); fresh noise z is drawn from rng unless supplied,
    and is forced to zero on the final step t = 1.
    """
    t_arr = schedule.check_t(t)
    if t_arr.ndim != 0:
        raise ValueError("reverse_step advances a single timestep t")
    ti = int(t_arr)
    x_t = np.asarray(x_t, dtype=np.float64)
    x0_hat = reconstruct_x0(x_t, ti, eps_hat, x_prior_std, schedule)
    mean = (
        schedule.gamma0[ti] * x0_hat
        + schedule.gamma1[ti] * x_t
        + schedule.gamma2[ti] * x_prior_std
    )
    if ti == 1:
        return mean
    if z is None:
        if rng is None:
            raise ValueError("reverse_step needs rng or z for t > 1")
        z = rng.standard_normal(x_t.shape)
    return mean + np.sqrt(schedule.beta_tilde[ti]) * z


# ---------------------------------------------------------------------------
# Likelihood-scan featurization
#
# The raw spectrum constrains XCO2 only through a near-degenerate trade-off
# against aerosol load and band albedo, which plain regression on radiances
# resolves poorly.  The scan makes the trade-off explicit: hold each
# candidate XCO2 on a fixed grid, fit the nuisances to the spectrum, and
# hand the network the resulting fit landscape.  Secondary explanations of
# the same spectrum then show up as plateaus or extra basins in the
# features instead of having to be rediscovered inside the network.

_scan_cache: dict = {}


def _scan_setup(scene_cfg: SceneConfig):
    if scene_cfg not in _scan_cache:
        grid = make_grid(scene_cfg)
        _scan_cache[scene_cfg] = (
            grid,
            build_optics(grid),
            np.linspace(*scene_cfg.xco2_range, SCAN_POINTS),
        )
    return _scan_cache[scene_cfg]


def _scan_forward(grid, optics, log_albedo, xco2, aerosol, mu, psurf):
    """Common-grid radiance and its aerosol derivative, vectorized over
    soundings."""
    n = log_albedo.shape[0]
    nc = grid.n_common
    rad = np.empty((n, nc))
    d_aer = np.empty((n, nc))
    start = 0
    for j, band in enumerate(grid.bands):
        depth = (
            xco2[:, None] * optics.tau_co2[j][None, :]
            + psurf[:, None] * optics.tau_air[j][None, :]
            + aerosol[:, None] * optics.tau_aer[j][None, :]
        )
        src = (np.exp(log_albedo[:, j]) * mu)[:, None] * optics.solar[j][None, :]
        src = src * np.exp(-depth)
        stop = start + band.common_wl.size
        rad[:, start:stop] = resample_band(src, band)
        d_aer[:, start:stop] = resample_band(-optics.tau_aer[j][None, :] * src, band)
        start = stop
    return rad, d_aer


def _scan_chunk(y, sza_deg, psurf, scene_cfg, grid, optics, x_grid):
    n, nc = y.shape
    mu = np.cos(np.deg2rad(sza_deg))
    weight = 1.0 / (scene_cfg.noise_floor + scene_cfg.noise_frac * np.abs(y)) ** 2
    band_of = np.repeat(np.arange(3), [b.common_wl.size for b in grid.bands])
    chi2 = np.empty((n, x_grid.size))
    aer_path = np.empty((n, x_grid.size))
    for k, xk in enumerate(x_grid):
        xco2 = np.full(n, xk)
        log_albedo = np.full((n, 3), np.log(0.35))
        aerosol = np.full(n, scene_cfg.aerosol_mean)
        for _ in range(SCAN_ITERS):
            rad, d_aer = _scan_forward(grid, optics, log_albedo, xco2, aerosol, mu, psurf)
            resid = y - rad
            jac = np.zeros((n, nc, 4))
            for b in range(3):
                jac[:, band_of == b, b] = rad[:, band_of == b]  # d rad / d logA_b
            jac[:, :, 3] = d_aer
            jw = jac * weight[:, :, None]
            normal = np.einsum("nij,nik->njk", jw, jac)
            normal[:, np.arange(4), np.arange(4)] += 1e-10
            rhs = np.einsum("nij,ni->nj", jw, resid)
            delta = np.linalg.solve(normal, rhs[..., None])[..., 0]
            # damped steps keep early iterations from overshooting on deep
            # spectra where the linearization is poor
            log_albedo += np.clip(delta[:, :3], -0.5, 0.5)
            aerosol = np.clip(
                aerosol + np.clip(delta[:, 3], -0.1, 0.1), 0.0, scene_cfg.aerosol_max
            )
        rad, _ = _scan_forward(grid, optics, log_albedo, xco2, aerosol, mu, psurf)
        chi2[:, k] = np.sum(weight * (y - rad) ** 2, axis=1) / nc
        aer_path[:, k] = aerosol
    return chi2, aer_path


def likelihood_scan(radiance, sza_deg, psurf, scene_cfg: SceneConfig | None = None,
                    *, chunk: int = 8192) -> np.ndarray:
    """Per-sounding fit landscape over a fixed grid of candidate XCO2 values.

    For each candidate the band albedos and the aerosol load are fit to the
    observed spectrum by a few damped Gauss-Newton steps under the
    instrument noise model, with the candidate held fixed.  Returns, per
    sounding: the fit landscape as clipped relative log-likelihood (flat
    ridges and secondary basins appear directly), the fitted aerosol along
    the grid (the nuisance trade-off direction), and the best fit quality.
    Shape (n, SCAN_FEATURES).
    """
    scene_cfg = scene_cfg or SceneConfig()
    grid, optics, x_grid = _scan_setup(scene_cfg)
    y = np.atleast_2d(np.asarray(radiance, dtype=np.float64))
    sza_deg = np.broadcast_to(np.asarray(sza_deg, dtype=np.float64), (y.shape[0],))
    psurf = np.broadcast_to(np.asarray(psurf, dtype=np.float64), (y.shape[0],))
    chi2 = np.empty((y.shape[0], x_grid.size))
    aer = np.empty((y.shape[0], x_grid.size))
    for lo in range(0, y.shape[0], chunk):
        sl = slice(lo, lo + chunk)
        chi2[sl], aer[sl] = _scan_chunk(
            y[sl], sza_deg[sl], psurf[sl], scene_cfg, grid, optics, x_grid
        )
    nc = y.shape[1]
    rel_ll = -0.5 * nc * (chi2 - chi2.min(axis=1, keepdims=True))
    landscape = np.clip(rel_ll / 10.0, -4.0, 0.0)
    fit_quality = np.log1p(chi2.min(axis=1))
    return np.column_stack([landscape, aer, fit_quality])


def scan_summary(scan_feats: np.ndarray, scene_cfg: SceneConfig) -> np.ndarray:
    """Moment summary (mean, scale) in ppm of the scan's posterior proxy.

    Grid weights combine the fit landscape with the exponential aerosol
    prior evaluated at the fitted aerosol path, so a flat likelihood ridge
    is resolved the same way the full marginal posterior resolves it.  The
    scale is floored at SCAN_SCALE_FLOOR since the grid cannot localize
    below its own spacing.  Shape (n, 2).
    """
    scan_feats = np.atleast_2d(np.asarray(scan_feats, dtype=np.float64))
    x_grid = np.linspace(*scene_cfg.xco2_range, SCAN_POINTS)
    landscape = scan_feats[:, :SCAN_POINTS]
    aer_path = scan_feats[:, SCAN_POINTS : 2 * SCAN_POINTS]
    log_w = 10.0 * landscape - aer_path / scene_cfg.aerosol_mean
    log_w -= log_w.max(axis=1, keepdims=True)
    w = np.exp(log_w)
    w /= w.sum(axis=1, keepdims=True)
    mean = w @ x_grid
    var = np.clip(w @ x_grid**2 - mean**2, 0.0, None)
    scale = np.maximum(np.sqrt(var), SCAN_SCALE_FLOOR)
    return np.column_stack([mean, scale])


# ---------------------------------------------------------------------------
# Denoiser network


def timestep_embedding(t, dim: int = 16) -> np.ndarray:
    """Sinusoidal embedding, deterministic in t; shape (..., dim)."""
    if dim % 2 != 0:
        raise ValueError("embedding dimension must be even")
    half = dim // 2
    freqs = np.power(10000.0, -np.arange(half) / max(half - 1, 1))
    angles = np.asarray(t, dtype=np.float64)[..., None] * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)


@dataclass
class DenoiserNet:
    spec: NetworkSpec
    params: ndnet.Params
    ema: ndnet.EMAState | None
    featurizer: str  # "radiance" (log lines), "scan" (+ fit landscape), "identity"
    norm_mean: np.ndarray
    norm_std: np.ndarray
    standardizer: LabelStandardizer
    t_embed_dim: int = 16
    config_echo: dict = field(default_factory=dict)
    history: dict = field(default_factory=dict)
    scene_cfg: SceneConfig | None = None  # needed by the scan featurizer

    def __post_init__(self):
        if self.featurizer not in FEATURIZERS:
            raise ValueError(f"unknown featurizer {self.featurizer!r}")
        if self.featurizer == "scan" and self.scene_cfg is None:
            raise ValueError("scan featurizer needs a scene config")

    @property
    def n_cov_features(self) -> int:
        return self.norm_mean.size

    def inference_params(self, use_ema: bool = True) -> ndnet.Params:
        if use_ema and self.ema is not None:
            return self.ema.shadow
        return self.params


def _raw_features(featurizer, covariates, scene_cfg):
    cov = np.atleast_2d(np.asarray(covariates, dtype=np.float64))
    if featurizer == "identity":
        return cov
    feats = covariate_features(cov)
    if featurizer == "scan":
        scan = likelihood_scan(cov[:, :-2], cov[:, -2], cov[:, -1], scene_cfg)
        feats = np.column_stack([feats, scan])
    return feats


def _featurize(net: DenoiserNet, covariates: np.ndarray):
    """Normalized net features plus, for the scan featurizer, the per-row
    scan summary in standardized label units (None otherwise)."""
    raw = _raw_features(net.featurizer, covariates, net.scene_cfg)
    summary = None
    if net.featurizer == "scan":
        ms = scan_summary(raw[:, -SCAN_FEATURES:], net.scene_cfg)
        summary = np.column_stack([
            net.standardizer.standardize(ms[:, 0]),
            ms[:, 1] / net.standardizer.std,
        ])
    return normalize(raw, net.norm_mean, net.norm_std), summary


def _baseline_eps(summary, xp_std, x_t, t, schedule: DiffusionSchedule):
    """Noise prediction of the Gaussian posterior implied by the scan summary.

    If the per-scene posterior really were N(mean, scale^2), the optimal
    eps_hat would be exactly this closed form; the network then only has to
    learn the correction (non-Gaussian shape, summary error), which is why
    the output head adds rather than replaces it.  Returns 0.0 when no
    summary is available.
    """
    if summary is None:
        return 0.0
    ab = schedule.alpha_bar[np.asarray(t)]
    resid = x_t - np.sqrt(ab) * summary[:, 0] - (1.0 - np.sqrt(ab)) * xp_std
    return resid * np.sqrt(1.0 - ab) / ((1.0 - ab) + ab * summary[:, 1] ** 2)


def _net_inputs(net, feats_norm, x_prior_std, x_t, t) -> np.ndarray:
    n = feats_norm.shape[0]
    emb = timestep_embedding(np.broadcast_to(t, (n,)), net.t_embed_dim)
    return np.column_stack([
        feats_norm,
        np.broadcast_to(x_prior_std, (n,)),
        np.asarray(x_t, dtype=np.float64),
        emb,
    ])


def init_denoiser(
    covariates: np.ndarray,
    labels: np.ndarray,
    *,
    featurizer: str = "scan",
    hidden: tuple[int, ...] = (128, 64),
    t_embed_dim: int = 16,
    seed: int = 0,
    scene_cfg: SceneConfig | None = None,
) -> DenoiserNet:
    """Fresh denoiser sized for the given covariates; stats fitted here."""
    if featurizer == "scan" and scene_cfg is None:
        scene_cfg = SceneConfig()
    cov = np.atleast_2d(np.asarray(covariates, dtype=np.float64))
    feats = _raw_features(featurizer, cov, scene_cfg)
    norm_mean, norm_std = feature_stats(feats)
    standardizer = LabelStandardizer.from_labels(labels)
    n_in = feats.shape[1] + 2 + t_embed_dim  # features, prior, x_t, embedding
    layers: list = []
    widths = [n_in, *hidden]
    for a, b in zip(widths[:-1], widths[1:]):
        layers.append(Dense(a, b))
    layers.append(Dense(widths[-1], 1, "identity"))
    spec = NetworkSpec((n_in,), tuple(layers))
    params = ndnet.init_params(spec, substream(seed, "init", 0))
    # zero the output layer so the fresh net predicts eps_hat = 0: the first
    # batches then see loss ~ E||eps||^2 = 1 and training starts unbiased
    params[-1]["w"][:] = 0.0
    return DenoiserNet(
        spec, params, None, featurizer, norm_mean, norm_std, standardizer,
        t_embed_dim, {"hidden": list(hidden), "seed": seed},
        scene_cfg=scene_cfg,
    )


# ---------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class DiffusionTrainOptions:
    epochs: int = 60
    batch_size: int = 96
    lr: float = 1.0e-3
    ema_decay: float = 0.999
    seed: int = 0
    eof_mode: str = "none"  # augmentation of the radiance block per epoch


def _prior_values(prior_model, covariates, external_values) -> np.ndarray:
    if prior_model.kind == "external":
        if external_values is None:
            raise ValueError("external prior requires external_values")
        return np.asarray(external_values, dtype=np.float64)
    return predict_prior_batch(prior_model, covariates)


def _perturbed_covariates(train, eof_set, mode, rng) -> np.ndarray:
    cov = train.covariates
    if mode == "none" or eof_set is None:
        return cov
    out = cov.copy()
    out[:, :-2] = perturb_radiance(cov[:, :-2], eof_set, rng, mode)
    return out


def train_denoiser(
    net: DenoiserNet,
    prior_model: PriorModel,
    train: Dataset,
    schedule: DiffusionSchedule,
    options: DiffusionTrainOptions = DiffusionTrainOptions(),
    *,
    eof_set: EOFSet | None = None,
    external_values: np.ndarray | None = None,
) -> DenoiserNet:
    """Noise-prediction training: MSE of eps_hat against the drawn eps.

    Each batch draws timesteps uniformly in 1..T and noises the standardized
    labels toward the (fixed) prior's standardized predictions.  When an EOF
    set and mode are given, the radiance block is re-perturbed every epoch
    and the prior re-evaluated on the perturbed covariates, so augmentation
    and conditioning stay consistent.  The EMA shadow trails every step and
    is what inference uses.
    """
    if options.eof_mode not in PERTURB_MODES:
        raise ValueError(f"unknown eof_mode {options.eof_mode!r}")
    if options.eof_mode != "none" and eof_set is None:
        raise ValueError("eof_mode set but no eof_set given")
    params = ndnet.copy_params(net.params)
    adam = ndnet.init_adam(params, lr=options.lr)
    ema = net.ema if net.ema is not None else ndnet.init_ema(params, options.ema_decay)
    ema = ndnet.EMAState(ema.decay, ndnet.copy_params(ema.shadow))
    spec = net.spec

    z0_all = net.standardizer.standardize(train.labels)
    static_aug = options.eof_mode in ("none", "fixed")
    if static_aug:
        cov = _perturbed_covariates(
            train, eof_set, options.eof_mode, substream(options.seed, "eof", 0)
        )
        feats, summ = _featurize(net, cov)
        zp_all = net.standardizer.standardize(
            _prior_values(prior_model, cov, external_values)
        )

    epoch_losses: list[float] = []
    first_batch_loss = None
    for epoch in range(options.epochs):
        if not static_aug:
            cov = _perturbed_covariates(
                train, eof_set, options.eof_mode, substream(options.seed, "eof", epoch)
            )
            feats, summ = _featurize(net, cov)
            zp_all = net.standardizer.standardize(
                _prior_values(prior_model, cov, external_values)
            )
        rng = substream(options.seed, "train", epoch)
        order = rng.permutation(train.n)
        batch_losses = []
        for lo in range(0, train.n, options.batch_size):
            sel = order[lo : lo + options.batch_size]
            t = rng.integers(1, schedule.T + 1, size=sel.size)
            x_t, eps = forward_noise(z0_all[sel], zp_all[sel], t, schedule, rng)
            base = _baseline_eps(
                None if summ is None else summ[sel], zp_all[sel], x_t, t, schedule
            )
            inputs = _net_inputs(net, feats[sel], zp_all[sel], x_t, t)
            out, caches = ndnet.forward_cached(spec, params, inputs)
            r = out[:, 0] + base - eps
            loss = float(np.mean(r**2))
            if not np.isfinite(loss):
                raise TrainingDivergenceError(
                    f"non-finite denoiser loss at epoch {epoch}, batch offset {lo}"
                )
            if first_batch_loss is None:
                first_batch_loss = loss
            grad_out = np.zeros_like(out)
            grad_out[:, 0] = 2.0 * r / r.size
            grads, _ = ndnet.backward(spec, params, caches, grad_out)
            ndnet.adam_step(params, grads, adam)
            ndnet.ema_update(ema, params)
            batch_losses.append(loss)
        epoch_losses.append(float(np.mean(batch_losses)))

    echo = dict(net.config_echo)
    echo["train"] = {
        "epochs": options.epochs,
        "batch_size": options.batch_size,
        "lr": options.lr,
        "ema_decay": options.ema_decay,
        "seed": options.seed,
        "eof_mode": options.eof_mode,
        "schedule": {"T": schedule.T, "s_offset": schedule.s_offset},
        "prior_kind": prior_model.kind,
    }
    history = dict(net.history)
    history["train_loss"] = epoch_losses
    history["first_batch_loss"] = first_batch_loss
    return replace(net, params=params, ema=ema, config_echo=echo, history=history)


# ---------------------------------------------------------------------------
# Sampling


def _sample_core(net, params, feats_norm, summary, xp_std, schedule, seed,
                 sounding_ids, n_samples):
    """Reverse chains for every (sounding, sample) pair, batched per step.

    Noise comes from per-pair substreams (one terminal draw plus T-1 step
    draws each), so results are independent of batching and ordering.
    """
    m = feats_norm.shape[0]
    T = schedule.T
    x = np.empty(m * n_samples)
    z_steps = np.empty((m * n_samples, T - 1))
    for i, sid in enumerate(sounding_ids):
        for k in range(n_samples):
            rng = substream(seed, "sample", int(sid), k)
            row = i * n_samples + k
            x[row] = rng.standard_normal()
            z_steps[row] = rng.standard_normal(T - 1)
    feats_rep = np.repeat(feats_norm, n_samples, axis=0)
    summ_rep = None if summary is None else np.repeat(summary, n_samples, axis=0)
    xp_rep = np.repeat(np.asarray(xp_std, dtype=np.float64), n_samples)
    x = xp_rep + x  # terminal draw ~ N(prior, 1)
    for t in range(T, 0, -1):
        inputs = _net_inputs(net, feats_rep, xp_rep, x, t)
        eps_hat = ndnet.forward(net.spec, params, inputs)[:, 0]
        eps_hat = eps_hat + _baseline_eps(summ_rep, xp_rep, x, t, schedule)
        z = z_steps[:, T - t] if t > 1 else None
        x = reverse_step(x, t, eps_hat, xp_rep, schedule, z=z)
    return x.reshape(m, n_samples)


def sample_posterior(
    net: DenoiserNet,
    prior_model: PriorModel,
    covariate: np.ndarray,
    n_samples: int,
    schedule: DiffusionSchedule,
    seed: int,
    *,
    sounding_id: int = 0,
    external_value: float | None = None,
    use_ema: bool = True,
) -> np.ndarray:
    """Posterior draws in ppm for one sounding."""
    ext = None if external_value is None else np.array([external_value])
    return sample_posterior_batch(
        net, prior_model, np.asarray(covariate)[None, :], n_samples, schedule, seed,
        sounding_ids=[sounding_id], external_values=ext, use_ema=use_ema,
    )[0]


def sample_posterior_batch(
    net: DenoiserNet,
    prior_model: PriorModel,
    covariates: np.ndarray,
    n_samples: int,
    schedule: DiffusionSchedule,
    seed: int,
    *,
    sounding_ids=None,
    external_values: np.ndarray | None = None,
    use_ema: bool = True,
) -> np.ndarray:
    """(n_soundings, n_samples) ppm draws under per-(sounding, sample) streams."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    covariates = np.atleast_2d(np.asarray(covariates, dtype=np.float64))
    if sounding_ids is None:
        sounding_ids = range(covariates.shape[0])
    sounding_ids = list(sounding_ids)
    if len(sounding_ids) != covariates.shape[0]:
        raise ValueError("one sounding id per covariate row")
    xp_ppm = _prior_values(prior_model, covariates, external_values)
    xp_std = net.standardizer.standardize(xp_ppm)
    feats, summ = _featurize(net, covariates)
    params = net.inference_params(use_ema)
    z = _sample_core(
        net, params, feats, summ, xp_std, schedule, seed, sounding_ids, n_samples
    )
    return net.standardizer.destandardize(z)


# ---------------------------------------------------------------------------
# Finetuning


@dataclass(frozen=True)
class DiffusionFinetuneOptions:
    max_epochs: int = 40
    batch_size: int = 32
    lr: float = 3.0e-4
    window: int = 5  # stop once val improvement over this many evals...
    tol: float = 1.0e-4  # ...falls below this
    seed: int = 0


def finetune_denoiser(
    net: DenoiserNet,
    finetuned_prior: PriorModel,
    finetune: Dataset,
    val: Dataset,
    schedule: DiffusionSchedule,
    options: DiffusionFinetuneOptions = DiffusionFinetuneOptions(),
    *,
    external_values: np.ndarray | None = None,
    external_values_val: np.ndarray | None = None,
) -> DenoiserNet:
    """Continue noise-prediction training until the validation loss settles.

    The validation loss is evaluated on a frozen set of (t, eps) draws so it
    is a deterministic function of the parameters; training stops when the
    improvement across the last `window` evaluations drops under `tol`, or
    at max_epochs.  An empty finetune set returns the net untouched.
    """
    if finetune.n == 0:
        return net
    params = ndnet.copy_params(net.params)
    adam = ndnet.init_adam(params, lr=options.lr)
    ema = net.ema if net.ema is not None else ndnet.init_ema(params)
    ema = ndnet.EMAState(ema.decay, ndnet.copy_params(ema.shadow))
    spec = net.spec

    z0 = net.standardizer.standardize(finetune.labels)
    feats, summ = _featurize(net, finetune.covariates)
    zp = net.standardizer.standardize(
        _prior_values(finetuned_prior, finetune.covariates, external_values)
    )
    z0_val = net.standardizer.standardize(val.labels)
    feats_val, summ_val = _featurize(net, val.covariates)
    zp_val = net.standardizer.standardize(
        _prior_values(finetuned_prior, val.covariates, external_values_val)
    )
    rng_val = substream(options.seed, "noise", 0)
    t_val = rng_val.integers(1, schedule.T + 1, size=val.n)
    x_t_val, eps_val = forward_noise(z0_val, zp_val, t_val, schedule, rng_val)
    val_inputs = _net_inputs(net, feats_val, zp_val, x_t_val, t_val)
    base_val = _baseline_eps(summ_val, zp_val, x_t_val, t_val, schedule)

    def val_loss() -> float:
        out = ndnet.forward(spec, params, val_inputs)
        return float(np.mean((out[:, 0] + base_val - eps_val) ** 2))

    val_hist = [val_loss()]
    stopped = None
    for epoch in range(options.max_epochs):
        rng = substream(options.seed, "train", epoch)
        order = rng.permutation(finetune.n)
        for lo in range(0, finetune.n, options.batch_size):
            sel = order[lo : lo + options.batch_size]
            t = rng.integers(1, schedule.T + 1, size=sel.size)
            x_t, eps = forward_noise(z0[sel], zp[sel], t, schedule, rng)
            base = _baseline_eps(
                None if summ is None else summ[sel], zp[sel], x_t, t, schedule
            )
            inputs = _net_inputs(net, feats[sel], zp[sel], x_t, t)
            out, caches = ndnet.forward_cached(spec, params, inputs)
            r = out[:, 0] + base - eps
            loss = float(np.mean(r**2))
            if not np.isfinite(loss):
                raise TrainingDivergenceError(
                    f"non-finite finetune loss at epoch {epoch}, batch offset {lo}"
                )
            grad_out = np.zeros_like(out)
            grad_out[:, 0] = 2.0 * r / r.size
            grads, _ = ndnet.backward(spec, params, caches, grad_out)
            ndnet.adam_step(params, grads, adam)
            ndnet.ema_update(ema, params)
        val_hist.append(val_loss())
        if len(val_hist) > options.window:
            if val_hist[-options.window - 1] - val_hist[-1] < options.tol:
                stopped = epoch + 1
                break

    echo = dict(net.config_echo)
    echo["finetune"] = {
        "max_epochs": options.max_epochs,
        "batch_size": options.batch_size,
        "lr": options.lr,
        "window": options.window,
        "tol": options.tol,
        "seed": options.seed,
        "prior_kind": finetuned_prior.kind,
    }
    history = dict(net.history)
    history["finetune_val_loss"] = val_hist
    history["finetune_stopped_epoch"] = stopped
    return replace(net, params=params, ema=ema, config_echo=echo, history=history)


# ---------------------------------------------------------------------------
# Checkpoint I/O: raw + EMA NDN1 blobs plus a JSON descriptor.


def save_denoiser(net: DenoiserNet, path) -> None:
    path = str(path)
    ndnet.save_params(path + ".ndn1", net.params)
    descriptor = {
        "format": "denoiser-descriptor",
        "version": DESCRIPTOR_VERSION,
        "featurizer": net.featurizer,
        "input_shape": list(net.spec.input_shape),
        "layers": [
            {"type": "dense", "in": l.in_features, "out": l.out_features,
             "activation": l.activation}
            for l in net.spec.layers
        ],
        "norm_mean": net.norm_mean.tolist(),
        "norm_std": net.norm_std.tolist(),
        "standardizer": {"mean": net.standardizer.mean, "std": net.standardizer.std},
        "t_embed_dim": net.t_embed_dim,
        "config_echo": net.config_echo,
        "history": net.history,
        "scene_config": None if net.scene_cfg is None else net.scene_cfg.to_dict(),
        "params_sha256": file_sha256(path + ".ndn1"),
    }
    if net.ema is not None:
        ndnet.save_params(path + ".ema.ndn1", net.ema.shadow)
        descriptor["ema"] = {
            "decay": net.ema.decay,
            "shadow_sha256": file_sha256(path + ".ema.ndn1"),
        }
    with open(path + ".json", "w") as f:
        f.write(canonical_json(descriptor))


def load_denoiser(path) -> DenoiserNet:
    path = str(path)
    with open(path + ".json") as f:
        descriptor = json.load(f)
    if descriptor.get("format") != "denoiser-descriptor":
        raise CheckpointError(f"{path}.json: not a denoiser descriptor")
    if descriptor.get("version") != DESCRIPTOR_VERSION:
        raise CheckpointError(
            f"{path}.json: unsupported descriptor version {descriptor.get('version')!r}"
        )
    if file_sha256(path + ".ndn1") != descriptor["params_sha256"]:
        raise CheckpointError(f"{path}.ndn1: parameter file hash mismatch")
    spec = NetworkSpec(
        tuple(descriptor["input_shape"]),
        tuple(
            Dense(d["in"], d["out"], d["activation"]) for d in descriptor["layers"]
        ),
    )
    params = ndnet.load_params(path + ".ndn1")
    ema = None
    if "ema" in descriptor:
        if file_sha256(path + ".ema.ndn1") != descriptor["ema"]["shadow_sha256"]:
            raise CheckpointError(f"{path}.ema.ndn1: shadow file hash mismatch")
        ema = ndnet.EMAState(descriptor["ema"]["decay"], ndnet.load_params(path + ".ema.ndn1"))
    scene_cfg = descriptor.get("scene_config")
    return DenoiserNet(
        spec,
        params,
        ema,
        descriptor["featurizer"],
        np.asarray(descriptor["norm_mean"], dtype=np.float64),
        np.asarray(descriptor["norm_std"], dtype=np.float64),
        LabelStandardizer(**descriptor["standardizer"]),
        int(descriptor["t_embed_dim"]),
        descriptor["config_echo"],
        descriptor["history"],
        scene_cfg=None if scene_cfg is None else scene_config_from_dict(scene_cfg),
    )
