"""Conditional-mean XCO2 priors.

Three interchangeable sources for the per-sounding prior mean: a small MLP
trained on simulated radiances, a Conv1D variant of the same regression, and
an "external" adapter that simply forwards a value supplied alongside the
sounding (the role a coarse analysis product plays in practice).  Trained
priors regress the label in standardized units from log-radiance features
normalized per feature; the feature statistics and label statistics travel
with the model so prediction never depends on which dataset happens to be in
hand.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import ndnet
from .ndnet import (
    CheckpointError,
    Conv1d,
    Dense,
    Flatten,
    MaxPool1d,
    NetworkSpec,
)
from .scenegen import Dataset, normalize
from .util import canonical_json, file_sha256, substream

logger = logging.getLogger(__name__)

PRIOR_KINDS = ("mlp", "conv1d", "external")

# Soft sanity window (ppm) for logged warnings only; predictions are never
# clamped into it.
PLAUSIBLE_PPM = (300.0, 500.0)

DESCRIPTOR_VERSION = 1


class TrainingDivergenceError(RuntimeError):
    """Raised when the training loss goes non-finite."""


@dataclass(frozen=True)
class TrainOptions:
    epochs: int = 300
    batch_size: int = 32
    lr: float = 1.0e-3
    patience: int = 10  # early stop after this many epochs without val improvement
    seed: int = 0


@dataclass(frozen=True)
class FinetuneOptions:
    epochs: int = 10
    unfreeze_last: int = 2  # trailing parameterized layers left trainable
    batch_size: int = 32
    lr: float = 3.0e-4
    seed: int = 0


@dataclass
class PriorModel:
    kind: str
    spec: NetworkSpec | None
    params: ndnet.Params | None
    norm_mean: np.ndarray | None  # per feature of covariate_features, from the training set
    norm_std: np.ndarray | None
    label_mean: float
    label_std: float
    config_echo: dict = field(default_factory=dict)
    history: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in PRIOR_KINDS:
            raise ValueError(f"unknown prior kind {self.kind!r}")
        if self.kind == "external":
            if self.spec is not None or self.params is not None:
                raise ValueError("external prior carries no network")
        elif self.spec is None or self.params is None:
            raise ValueError(f"{self.kind} prior requires a network spec and parameters")


def external_prior() -> PriorModel:
    """The adapter that forwards a per-sounding external value unchanged."""
    return PriorModel("external", None, None, None, None, 0.0, 1.0)


def external_surrogate(labels: np.ndarray, seed: int, std_ppm: float = 3.0) -> np.ndarray:
    """Stand-in feed for an external analysis: truth plus seeded Gaussian error."""
    rng = np.random.default_rng(seed)
    return np.asarray(labels, dtype=np.float64) + std_ppm * rng.standard_normal(len(labels))


# ---------------------------------------------------------------------------
# Features and architectures

# Radiances span two decades, and the quantity that varies linearly with the
# state is (minus) their log.  Feeding log radiance makes the regression
# nearly linear apart from the airmass factor; raw radiance costs both
# network kinds a few ppm.  The floor keeps pathological inputs finite.
LOG_RADIANCE_FLOOR = 1.0e-7


def covariate_features(covariates: np.ndarray) -> np.ndarray:
    """Input transform for trained priors: log radiances, raw trailing scalars."""
    cov = np.atleast_2d(np.asarray(covariates, dtype=np.float64))
    rad = np.log(np.clip(cov[:, :-2], LOG_RADIANCE_FLOOR, None))
    return np.column_stack([rad, cov[:, -2:]])


def feature_stats(features: np.ndarray):
    mean = features.mean(axis=0)
    std = features.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)  # constant features pass through
    return mean, std


def mlp_spec(n_features: int) -> NetworkSpec:
    return NetworkSpec(
        (n_features,),
        (
            Dense(n_features, 64),
            Dense(64, 32),
            Dense(32, 1, "identity"),
        ),
    )


def conv1d_spec(n_features: int) -> NetworkSpec:
    """Shared local-contrast kernels over the feature sequence, dense head.

    No pooling: channel positions carry fixed spectral meaning, and the dense
    head needs them intact.  The trailing scalar covariates ride along at the
    end of the sequence.
    """
    front: list = [Conv1d(1, 8, 5), Conv1d(8, 8, 3), Flatten()]
    flat = NetworkSpec((1, n_features), tuple(front)).output_shape[0]
    front += [Dense(flat, 32), Dense(32, 1, "identity")]
    return NetworkSpec((1, n_features), tuple(front))


def _shape_input(kind: str, xn: np.ndarray) -> np.ndarray:
    # normalized covariates -> network input layout
    if kind == "conv1d":
        return xn[:, None, :]
    return xn


# ---------------------------------------------------------------------------
# Training


def _label_stats(labels: np.ndarray) -> tuple[float, float]:
    mean = float(np.mean(labels))
    std = float(np.std(labels))
    if std < 1e-8:  # constant labels: predict in raw offset units
        std = 1.0
    return mean, std


def _mean_squared_error(spec, params, x, z) -> float:
    out = ndnet.forward(spec, params, x)
    return float(np.mean((out[:, 0] - z) ** 2))


def _train_step(spec, params, x, z, adam) -> float:
    out, caches = ndnet.forward_cached(spec, params, x)
    r = out[:, 0] - z
    loss = float(np.mean(r**2))
    grad_out = np.zeros_like(out)
    grad_out[:, 0] = 2.0 * r / r.size
    grads, _ = ndnet.backward(spec, params, caches, grad_out)
    if not np.isfinite(loss):
        raise TrainingDivergenceError(
            f"non-finite training loss {loss!r} at adam step {adam.step + 1}"
        )
    ndnet.adam_step(params, grads, adam)
    return loss


def pretrain_prior(
    kind: str,
    train: Dataset,
    val: Dataset,
    options: TrainOptions = TrainOptions(),
) -> PriorModel:
    """Fit f(covariates) ~ label by minibatch MSE; keep the best-validation epoch.

    Covariates are normalized with the training set's per-feature statistics
    and labels standardized the same way, so the network works in O(1) units.
    Stops early once validation loss has not improved for options.patience
    epochs, and always returns the parameters from the best epoch seen.
    """
    if kind not in ("mlp", "conv1d"):
        raise ValueError(f"cannot pretrain prior kind {kind!r}")
    f_train = covariate_features(train.covariates)
    norm_mean, norm_std = feature_stats(f_train)
    label_mean, label_std = _label_stats(train.labels)

    spec = (mlp_spec if kind == "mlp" else conv1d_spec)(train.n_features)
    params = ndnet.init_params(spec, substream(options.seed, "init", 0))
    adam = ndnet.init_adam(params, lr=options.lr)

    x_train = _shape_input(kind, normalize(f_train, norm_mean, norm_std))
    z_train = (train.labels - label_mean) / label_std
    x_val = _shape_input(
        kind, normalize(covariate_features(val.covariates), norm_mean, norm_std)
    )
    z_val = (val.labels - label_mean) / label_std

    best_params = ndnet.copy_params(params)
    best_val = _mean_squared_error(spec, params, x_val, z_val)
    best_epoch = -1  # the untrained network, in case nothing improves
    train_hist: list[float] = []
    val_hist: list[float] = []
    stale = 0
    for epoch in range(options.epochs):
        order = substream(options.seed, "train", epoch).permutation(train.n)
        batch_losses = []
        for lo in range(0, train.n, options.batch_size):
            sel = order[lo : lo + options.batch_size]
            batch_losses.append(_train_step(spec, params, x_train[sel], z_train[sel], adam))
        train_hist.append(float(np.mean(batch_losses)))
        val_loss = _mean_squared_error(spec, params, x_val, z_val)
        if not np.isfinite(val_loss):
            raise TrainingDivergenceError(f"non-finite validation loss at epoch {epoch}")
        val_hist.append(val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best_params = ndnet.copy_params(params)
            best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= options.patience:
                break

    echo = {
        "kind": kind,
        "epochs": options.epochs,
        "batch_size": options.batch_size,
        "lr": options.lr,
        "patience": options.patience,
        "seed": options.seed,
        "train_config": train.config_echo,
    }
    history = {
        "train_loss": train_hist,
        "val_loss": val_hist,
        "best_epoch": best_epoch,
        "best_val_loss": best_val,
    }
    return PriorModel(
        kind, spec, best_params, norm_mean.copy(), norm_std.copy(),
        label_mean, label_std, echo, history,
    )


# ---------------------------------------------------------------------------
# Prediction


def predict_prior(
    model: PriorModel,
    covariate: np.ndarray,
    external_value: float | None = None,
) -> float:
    """Prior mean in ppm for one sounding."""
    if model.kind == "external":
        if external_value is None:
            raise ValueError("external prior requires external_value")
        out = float(external_value)
    else:
        out = float(predict_prior_batch(model, np.asarray(covariate)[None, :])[0])
    if not PLAUSIBLE_PPM[0] <= out <= PLAUSIBLE_PPM[1]:
        logger.warning("prior prediction %.2f ppm outside plausible range %s", out, PLAUSIBLE_PPM)
    return out


def predict_prior_batch(model: PriorModel, covariates: np.ndarray) -> np.ndarray:
    """Vectorized prediction for trained kinds, (n, n_features) -> (n,) ppm."""
    if model.kind == "external":
        raise ValueError("external prior predicts from external_value, not covariates")
    xn = _shape_input(
        model.kind,
        normalize(covariate_features(covariates), model.norm_mean, model.norm_std),
    )
    out = ndnet.forward(model.spec, model.params, xn)
    return out[:, 0] * model.label_std + model.label_mean


# ---------------------------------------------------------------------------
# Finetuning


def _parameterized_layers(spec: NetworkSpec) -> list[int]:
    return [i for i, layer in enumerate(spec.layers) if isinstance(layer, (Dense, Conv1d))]


def finetune_prior(
    model: PriorModel,
    finetune: Dataset,
    options: FinetuneOptions = FinetuneOptions(),
) -> PriorModel:
    """Continue training with only the trailing layers unfrozen.

    "Layers" counts parameterized layers only (pooling and flatten carry
    nothing to freeze).  Frozen layers receive zero gradient, which leaves
    their parameters bit-identical through the Adam updates.  The input and
    label statistics are the model's own, so the finetune set is mapped into
    the same normalized space the network was trained in.
    """
    if model.kind == "external":
        raise ValueError("external prior has no parameters to finetune")
    if options.unfreeze_last < 0:
        raise ValueError("unfreeze_last must be >= 0")
    params = ndnet.copy_params(model.params)
    if options.unfreeze_last == 0 or options.epochs == 0:
        return replace(model, params=params)

    trainable = _parameterized_layers(model.spec)
    unfrozen = set(trainable[-options.unfreeze_last :])
    frozen = [i for i in range(len(model.spec.layers)) if i not in unfrozen]

    x = _shape_input(
        model.kind,
        normalize(covariate_features(finetune.covariates), model.norm_mean, model.norm_std),
    )
    z = (finetune.labels - model.label_mean) / model.label_std
    adam = ndnet.init_adam(params, lr=options.lr)
    spec = model.spec
    losses: list[float] = []
    for epoch in range(options.epochs):
        order = substream(options.seed, "train", epoch).permutation(finetune.n)
        batch_losses = []
        for lo in range(0, finetune.n, options.batch_size):
            sel = order[lo : lo + options.batch_size]
            out, caches = ndnet.forward_cached(spec, params, x[sel])
            r = out[:, 0] - z[sel]
            loss = float(np.mean(r**2))
            if not np.isfinite(loss):
                raise TrainingDivergenceError(
                    f"non-finite finetune loss at epoch {epoch}, batch offset {lo}"
                )
            grad_out = np.zeros_like(out)
            grad_out[:, 0] = 2.0 * r / r.size
            grads, _ = ndnet.backward(spec, params, caches, grad_out)
            for i in frozen:
                grads[i] = {k: np.zeros_like(v) for k, v in grads[i].items()}
            ndnet.adam_step(params, grads, adam)
            batch_losses.append(loss)
        losses.append(float(np.mean(batch_losses)))

    echo = dict(model.config_echo)
    echo["finetune"] = {
        "epochs": options.epochs,
        "unfreeze_last": options.unfreeze_last,
        "batch_size": options.batch_size,
        "lr": options.lr,
        "seed": options.seed,
        "set_config": finetune.config_echo,
    }
    history = dict(model.history)
    history["finetune_loss"] = losses
    return replace(model, params=params, config_echo=echo, history=history)


# ---------------------------------------------------------------------------
# Checkpoint I/O: NDN1 parameter blob + JSON descriptor alongside.


def _layer_to_json(layer) -> dict:
    if isinstance(layer, Dense):
        return {"type": "dense", "in": layer.in_features, "out": layer.out_features,
                "activation": layer.activation}
    if isinstance(layer, Conv1d):
        return {"type": "conv1d", "in": layer.in_channels, "out": layer.out_channels,
                "kernel": layer.kernel, "stride": layer.stride,
                "activation": layer.activation}
    if isinstance(layer, MaxPool1d):
        return {"type": "maxpool1d", "window": layer.window}
    return {"type": "flatten"}


def _layer_from_json(d: dict):
    if d["type"] == "dense":
        return Dense(d["in"], d["out"], d["activation"])
    if d["type"] == "conv1d":
        return Conv1d(d["in"], d["out"], d["kernel"], d["stride"], d["activation"])
    if d["type"] == "maxpool1d":
        return MaxPool1d(d["window"])
    if d["type"] == "flatten":
        return Flatten()
    raise CheckpointError(f"unknown layer type {d['type']!r} in prior descriptor")


def save_prior(model: PriorModel, path) -> None:
    """Write {path}.ndn1 (parameters) and {path}.json (everything else)."""
    if model.kind == "external":
        raise ValueError("external prior has no checkpoint to save")
    path = str(path)
    ndnet.save_params(path + ".ndn1", model.params)
    descriptor = {
        "format": "prior-descriptor",
        "version": DESCRIPTOR_VERSION,
        "kind": model.kind,
        "input_shape": list(model.spec.input_shape),
        "layers": [_layer_to_json(layer) for layer in model.spec.layers],
        "norm_mean": model.norm_mean.tolist(),
        "norm_std": model.norm_std.tolist(),
        "label_mean": model.label_mean,
        "label_std": model.label_std,
        "config_echo": model.config_echo,
        "history": model.history,
        "params_sha256": file_sha256(path + ".ndn1"),
    }
    with open(path + ".json", "w") as f:
        f.write(canonical_json(descriptor))


def load_prior(path) -> PriorModel:
    path = str(path)
    with open(path + ".json") as f:
        descriptor = json.load(f)
    if descriptor.get("format") != "prior-descriptor":
        raise CheckpointError(f"{path}.json: not a prior descriptor")
    if descriptor.get("version") != DESCRIPTOR_VERSION:
        raise CheckpointError(
            f"{path}.json: unsupported descriptor version {descriptor.get('version')!r}"
        )
    digest = file_sha256(path + ".ndn1")
    if digest != descriptor["params_sha256"]:
        raise CheckpointError(f"{path}.ndn1: parameter file hash mismatch")
    spec = NetworkSpec(
        tuple(descriptor["input_shape"]),
        tuple(_layer_from_json(d) for d in descriptor["layers"]),
    )
    params = ndnet.load_params(path + ".ndn1")
    if len(params) != len(spec.layers):
        raise CheckpointError(f"{path}: parameter count does not match layer stack")
    return PriorModel(
        descriptor["kind"],
        spec,
        params,
        np.asarray(descriptor["norm_mean"], dtype=np.float64),
        np.asarray(descriptor["norm_std"], dtype=np.float64),
        float(descriptor["label_mean"]),
        float(descriptor["label_std"]),
        descriptor["config_echo"],
        descriptor["history"],
    )
