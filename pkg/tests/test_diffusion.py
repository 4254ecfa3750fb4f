"""Schedule identities, kernel algebra, denoiser training, and sampling."""
import dataclasses
import math

import numpy as np
import pytest

from xco2diff import diffusion as df
from xco2diff import ndnet
from xco2diff import priors as pr
from xco2diff.ndnet import CheckpointError
from xco2diff.priors import TrainingDivergenceError
from xco2diff.scenegen import Dataset


def make_dataset(covariates, labels, split="train"):
    labels = np.asarray(labels, dtype=np.float64)
    return Dataset(
        np.asarray(covariates, dtype=np.float64), labels,
        np.arange(labels.size), split, None, None, None, 0, {},
    )


def params_bytes(params):
    return b"".join(
        layer[k].tobytes() for layer in params for k in sorted(layer)
    )


def cosine_betas_by_hand(T, s):
    # duplicate arithmetic, scalar math only
    def f(u):
        return math.cos(((u / T + s) / (1.0 + s)) * math.pi / 2.0) ** 2

    out = []
    for t in range(1, T + 1):
        b = 1.0 - (f(t) / f(0)) / (f(t - 1) / f(0))
        out.append(min(max(b, 1e-6), 0.999))
    return np.array(out)


@pytest.fixture(scope="module")
def sched():
    return df.build_cosine_schedule(50)


@pytest.fixture(scope="module")
def degen():
    """Net trained on the degenerate problem where the prior equals the label.

    x_t = x_prior + sqrt(1 - alpha_bar) * eps is then fully informative of
    eps, so default training drives the noise MSE close to zero.
    """
    rng = np.random.default_rng(3)
    n = 2000
    labels = 400.0 + 10.0 * rng.standard_normal(n)
    covariates = rng.uniform(0.1, 1.0, (n, 4))
    train = make_dataset(covariates, labels)
    schedule = df.build_cosine_schedule(50)
    net = df.init_denoiser(covariates, labels, featurizer="identity", seed=0)
    net = df.train_denoiser(
        net, pr.external_prior(), train, schedule,
        df.DiffusionTrainOptions(seed=0), external_values=labels,
    )
    return net, train, schedule


@pytest.fixture(scope="module")
def conjugate():
    """y = x + noise with Gaussian x: the posterior has a closed form."""
    mu0, sigma0, sigma = 400.0, 3.0, 2.0
    rng = np.random.default_rng(11)
    n = 8000
    x = mu0 + sigma0 * rng.standard_normal(n)
    y = x + sigma * rng.standard_normal(n)
    train = make_dataset(y[:, None], x)
    schedule = df.build_cosine_schedule(50)
    net = df.init_denoiser(y[:, None], x, featurizer="identity", seed=0)
    net = df.train_denoiser(
        net, pr.external_prior(), train, schedule,
        df.DiffusionTrainOptions(epochs=200, seed=0),
        external_values=np.full(n, mu0),
    )

    def posterior(y_obs):
        prec = 1.0 / sigma0**2 + 1.0 / sigma**2
        return (mu0 / sigma0**2 + y_obs / sigma**2) / prec, prec**-0.5

    return net, schedule, mu0, posterior


# ---------------------------------------------------------------------------
# build_cosine_schedule


def test_alpha_bar_starts_at_one_and_decreases(sched):
    assert sched.alpha_bar[0] == 1.0
    assert np.all(np.diff(sched.alpha_bar) < 0)
    assert sched.alpha_bar[50] < 0.01


def test_betas_match_hand_computed_cosine_values(sched):
    assert np.max(np.abs(sched.beta[1:] - cosine_betas_by_hand(50, 0.008))) < 1e-12


def test_betas_stay_inside_clip_bounds(sched):
    assert np.all(sched.beta[1:] >= 1e-6)
    assert np.all(sched.beta[1:] <= 0.999)


def test_gamma_coefficients_sum_to_one(sched):
    total = sched.gamma0[1:] + sched.gamma1[1:] + sched.gamma2[1:]
    assert np.max(np.abs(total - 1.0)) < 1e-12


def test_final_step_coefficients_collapse(sched):
    # at t=1 the posterior is a point mass on x0_hat
    assert sched.gamma0[1] == pytest.approx(1.0, abs=1e-12)
    assert sched.gamma1[1] == pytest.approx(0.0, abs=1e-12)
    assert sched.gamma2[1] == pytest.approx(0.0, abs=1e-12)
    assert sched.beta_tilde[1] == 0.0


def test_schedule_rejects_bad_arguments():
    with pytest.raises(ValueError):
        df.build_cosine_schedule(1)
    with pytest.raises(ValueError):
        df.build_cosine_schedule(50, s_offset=0.0)
    with pytest.raises(ValueError):
        df.build_cosine_schedule(50, s_offset=-0.01)


# ---------------------------------------------------------------------------
# LabelStandardizer


def test_standardizer_round_trip():
    rng = np.random.default_rng(0)
    std = df.LabelStandardizer.from_labels(rng.normal(400.0, 8.0, 500))
    ppm = rng.uniform(360.0, 440.0, 200)
    assert np.max(np.abs(std.destandardize(std.standardize(ppm)) - ppm)) < 1e-12


def test_standardizer_rejects_nonpositive_std():
    with pytest.raises(ValueError):
        df.LabelStandardizer(400.0, 0.0)
    with pytest.raises(ValueError):
        df.LabelStandardizer(400.0, -1.0)


def test_standardizer_constant_labels_fall_back_to_unit_std():
    std = df.LabelStandardizer.from_labels(np.full(10, 404.0))
    assert std.std == 1.0
    assert std.standardize(404.0) == 0.0


# ---------------------------------------------------------------------------
# timestep_embedding


def test_embedding_deterministic_and_bounded():
    t = np.arange(1, 51)
    a = df.timestep_embedding(t, 16)
    b = df.timestep_embedding(t, 16)
    assert a.shape == (50, 16)
    assert np.array_equal(a, b)
    assert np.all(np.abs(a) <= 1.0)
    # all timesteps distinguishable
    assert len({row.tobytes() for row in a}) == 50


def test_embedding_rejects_odd_dimension():
    with pytest.raises(ValueError):
        df.timestep_embedding(np.array([1]), 15)


# ---------------------------------------------------------------------------
# forward_noise / reconstruct_x0


def test_forward_at_unit_alpha_bar_returns_x0_exactly(sched):
    ab = sched.alpha_bar.copy()
    ab[1] = 1.0
    frozen = dataclasses.replace(sched, alpha_bar=ab)
    x0 = np.array([0.3, -1.2, 2.0])
    x_t, _ = df.forward_noise(x0, 0.5, 1, frozen, np.random.default_rng(0))
    assert np.array_equal(x_t, x0)


def test_forward_at_zero_alpha_bar_is_unit_normal_about_prior(sched):
    ab = sched.alpha_bar.copy()
    ab[50] = 0.0
    frozen = dataclasses.replace(sched, alpha_bar=ab)
    xp = -0.4
    x0 = np.zeros(200_000)
    x_t, _ = df.forward_noise(x0, xp, 50, frozen, np.random.default_rng(1))
    assert abs(x_t.mean() - xp) < 0.01
    assert abs(x_t.std() - 1.0) < 0.02


def test_forward_midpoint_moments_match_closed_form(sched):
    x0, xp, t = 0.7, -0.3, 25
    sab = math.sqrt(sched.alpha_bar[t])
    mean = sab * x0 + (1.0 - sab) * xp
    var = 1.0 - sched.alpha_bar[t]
    x_t, _ = df.forward_noise(
        np.full(100_000, x0), xp, t, sched, np.random.default_rng(2)
    )
    assert abs(x_t.mean() - mean) < 0.02 * abs(mean)
    assert abs(x_t.var() - var) < 0.02 * var


def test_forward_rejects_out_of_range_or_fractional_t(sched):
    rng = np.random.default_rng(0)
    for bad in (0, 51, np.array([1, 51])):
        with pytest.raises(ValueError):
            df.forward_noise(np.zeros(2), 0.0, bad, sched, rng)
    with pytest.raises(ValueError):
        df.forward_noise(np.zeros(2), 0.0, 25.0, sched, rng)


def test_reconstruction_inverts_forward_at_every_t(sched):
    rng = np.random.default_rng(4)
    for t in range(1, 51):
        x0 = rng.normal(0.0, 1.0, 16)
        xp = rng.normal(0.0, 1.0)
        x_t, eps = df.forward_noise(x0, xp, t, sched, rng)
        back = df.reconstruct_x0(x_t, t, eps, xp, sched)
        assert np.max(np.abs(back - x0)) < 1e-10


# ---------------------------------------------------------------------------
# reverse_step


def test_reverse_with_oracle_noise_at_final_step_recovers_x0(sched):
    rng = np.random.default_rng(5)
    x0 = rng.normal(0.0, 1.0, 32)
    xp = 0.8
    x_1, eps = df.forward_noise(x0, xp, 1, sched, rng)
    out = df.reverse_step(x_1, 1, eps, xp, sched)
    assert np.max(np.abs(out - x0)) < 1e-10


def test_zero_prior_reduces_to_unshifted_posterior_step(sched):
    rng = np.random.default_rng(6)
    for t in rng.choice(np.arange(2, 51), 5, replace=False):
        t = int(t)
        # the prior coefficient is exactly the affine residual ...
        resid = 1.0 - sched.gamma0[t] - sched.gamma1[t]
        assert sched.gamma2[t] == pytest.approx(resid, abs=1e-12)
        # ... so with x_prior = 0 the step is the plain DDPM posterior mean
        x_t = rng.normal(0.0, 1.0, 8)
        eps_hat = rng.normal(0.0, 1.0, 8)
        ab, ab_prev = sched.alpha_bar[t], sched.alpha_bar[t - 1]
        beta, alpha = sched.beta[t], sched.alpha[t]
        x0_hat = (x_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)
        want = (
            beta * np.sqrt(ab_prev) * x0_hat
            + (1.0 - ab_prev) * np.sqrt(alpha) * x_t
        ) / (1.0 - ab)
        got = df.reverse_step(x_t, t, eps_hat, 0.0, sched, z=np.zeros(8))
        assert np.max(np.abs(got - want)) < 1e-12


def test_constant_state_is_a_fixed_point(sched):
    c = 1.37
    for t in range(1, 51):
        z = None if t == 1 else np.zeros(3)
        out = df.reverse_step(np.full(3, c), t, np.zeros(3), c, sched, z=z)
        assert np.max(np.abs(out - c)) < 1e-12


def test_reverse_needs_noise_source_for_inner_steps(sched):
    with pytest.raises(ValueError):
        df.reverse_step(np.zeros(2), 5, np.zeros(2), 0.0, sched)
    # final step draws no noise, so neither rng nor z is required
    df.reverse_step(np.zeros(2), 1, np.zeros(2), 0.0, sched)


def test_reverse_rejects_vector_t(sched):
    with pytest.raises(ValueError):
        df.reverse_step(
            np.zeros(2), np.array([2, 3]), np.zeros(2), 0.0, sched,
            z=np.zeros(2),
        )


# ---------------------------------------------------------------------------
# init_denoiser


def test_fresh_net_predicts_zero_noise():
    rng = np.random.default_rng(7)
    cov = rng.uniform(0.1, 1.0, (50, 4))
    labels = rng.normal(400.0, 5.0, 50)
    net = df.init_denoiser(cov, labels, featurizer="identity", seed=0)
    inputs = rng.normal(0.0, 1.0, (20, net.spec.input_shape[0]))
    out = ndnet.forward(net.spec, net.params, inputs)
    assert np.all(out == 0.0)
    # only the head is zeroed; the hidden stack is live
    assert np.any(net.params[0]["w"] != 0.0)


def test_init_is_seed_deterministic():
    rng = np.random.default_rng(8)
    cov = rng.uniform(0.1, 1.0, (50, 4))
    labels = rng.normal(400.0, 5.0, 50)
    a = df.init_denoiser(cov, labels, featurizer="identity", seed=3)
    b = df.init_denoiser(cov, labels, featurizer="identity", seed=3)
    c = df.init_denoiser(cov, labels, featurizer="identity", seed=4)
    assert params_bytes(a.params) == params_bytes(b.params)
    assert params_bytes(a.params) != params_bytes(c.params)


def test_input_width_counts_features_prior_state_and_embedding():
    rng = np.random.default_rng(9)
    cov = rng.uniform(0.1, 1.0, (50, 6))
    net = df.init_denoiser(
        cov, rng.normal(400.0, 5.0, 50), featurizer="identity", t_embed_dim=8,
    )
    assert net.spec.input_shape == (6 + 2 + 8,)


# ---------------------------------------------------------------------------
# train_denoiser


def test_degenerate_prior_drives_noise_mse_low(degen):
    net, _, _ = degen
    assert net.history["train_loss"][-1] < 0.05


def test_first_batch_loss_of_fresh_net_is_near_one():
    # eps_hat = 0 at init, so the first batch sees roughly E||eps||^2 = 1
    rng = np.random.default_rng(10)
    n = 10_000
    labels = 400.0 + 10.0 * rng.standard_normal(n)
    cov = rng.uniform(0.1, 1.0, (n, 4))
    train = make_dataset(cov, labels)
    schedule = df.build_cosine_schedule(50)
    net = df.init_denoiser(cov, labels, featurizer="identity", seed=0)
    net = df.train_denoiser(
        net, pr.external_prior(), train, schedule,
        df.DiffusionTrainOptions(epochs=1, batch_size=n, seed=0),
        external_values=np.full(n, 400.0),
    )
    assert abs(net.history["first_batch_loss"] - 1.0) < 0.2


def test_same_seed_training_is_bit_identical():
    rng = np.random.default_rng(12)
    n = 256
    labels = 400.0 + 10.0 * rng.standard_normal(n)
    cov = rng.uniform(0.1, 1.0, (n, 4))
    train = make_dataset(cov, labels)
    schedule = df.build_cosine_schedule(50)

    def run():
        net = df.init_denoiser(cov, labels, featurizer="identity", seed=0)
        return df.train_denoiser(
            net, pr.external_prior(), train, schedule,
            df.DiffusionTrainOptions(epochs=3, seed=0), external_values=labels,
        )

    a, b = run(), run()
    assert params_bytes(a.params) == params_bytes(b.params)
    assert params_bytes(a.ema.shadow) == params_bytes(b.ema.shadow)
    assert a.history["train_loss"] == b.history["train_loss"]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_exploding_training_aborts():
    rng = np.random.default_rng(13)
    n = 128
    labels = 400.0 + 10.0 * rng.standard_normal(n)
    cov = rng.uniform(0.1, 1.0, (n, 4))
    train = make_dataset(cov, labels)
    schedule = df.build_cosine_schedule(50)
    net = df.init_denoiser(cov, labels, featurizer="identity", seed=0)
    with pytest.raises(TrainingDivergenceError):
        df.train_denoiser(
            net, pr.external_prior(), train, schedule,
            df.DiffusionTrainOptions(epochs=5, lr=1e308, seed=0),
            external_values=labels,
        )


def test_train_validates_eof_arguments(degen):
    net, train, schedule = degen
    with pytest.raises(ValueError):
        df.train_denoiser(
            net, pr.external_prior(), train, schedule,
            df.DiffusionTrainOptions(epochs=1, eof_mode="sideways"),
            external_values=train.labels,
        )
    with pytest.raises(ValueError):
        df.train_denoiser(
            net, pr.external_prior(), train, schedule,
            df.DiffusionTrainOptions(epochs=1, eof_mode="fixed"),
            external_values=train.labels,
        )


def test_train_with_external_prior_requires_values(degen):
    net, train, schedule = degen
    with pytest.raises(ValueError):
        df.train_denoiser(
            net, pr.external_prior(), train, schedule,
            df.DiffusionTrainOptions(epochs=1),
        )


# ---------------------------------------------------------------------------
# sample_posterior


def test_sampling_returns_finite_ppm_values(degen):
    net, train, schedule = degen
    out = df.sample_posterior(
        net, pr.external_prior(), train.covariates[0], 10, schedule, seed=1,
        external_value=float(train.labels[0]),
    )
    assert out.shape == (10,)
    assert np.all(np.isfinite(out))
    assert np.all((out > 300.0) & (out < 500.0))


def test_sampling_is_seed_and_id_deterministic(degen):
    net, train, schedule = degen
    kw = dict(external_value=float(train.labels[0]))
    a = df.sample_posterior(
        net, pr.external_prior(), train.covariates[0], 8, schedule, seed=1, **kw
    )
    b = df.sample_posterior(
        net, pr.external_prior(), train.covariates[0], 8, schedule, seed=1, **kw
    )
    c = df.sample_posterior(
        net, pr.external_prior(), train.covariates[0], 8, schedule, seed=2, **kw
    )
    d = df.sample_posterior(
        net, pr.external_prior(), train.covariates[0], 8, schedule, seed=1,
        sounding_id=7, **kw
    )
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, d)


def test_batched_sampling_matches_single_sounding_calls(degen):
    # per-(sounding, sample) substreams make results batching-independent
    net, train, schedule = degen
    cov = train.covariates[:3]
    ext = train.labels[:3]
    batch = df.sample_posterior_batch(
        net, pr.external_prior(), cov, 5, schedule, seed=9,
        sounding_ids=[4, 0, 2], external_values=ext,
    )
    for row, (sid, c, e) in enumerate(zip([4, 0, 2], cov, ext)):
        single = df.sample_posterior(
            net, pr.external_prior(), c, 5, schedule, seed=9,
            sounding_id=sid, external_value=float(e),
        )
        assert np.array_equal(batch[row], single)


def test_sampling_rejects_bad_arguments(degen):
    net, train, schedule = degen
    with pytest.raises(ValueError):
        df.sample_posterior(
            net, pr.external_prior(), train.covariates[0], 0, schedule, seed=1,
            external_value=400.0,
        )
    with pytest.raises(ValueError):
        df.sample_posterior_batch(
            net, pr.external_prior(), train.covariates[:2], 4, schedule, seed=1,
            sounding_ids=[0], external_values=train.labels[:2],
        )


def test_conjugate_posterior_two_moment_check(conjugate):
    net, schedule, mu0, posterior = conjugate
    y_obs = 404.0
    mean, std = posterior(y_obs)
    samples = df.sample_posterior(
        net, pr.external_prior(), np.array([y_obs]), 10_000, schedule, seed=5,
        external_value=mu0,
    )
    assert abs(samples.mean() - mean) < 0.3
    assert abs(samples.std() - std) < 0.10 * std


# ---------------------------------------------------------------------------
# finetune_denoiser


def test_empty_finetune_set_returns_net_untouched(degen):
    net, train, schedule = degen
    empty = make_dataset(np.empty((0, 4)), np.empty(0), "finetune")
    out = df.finetune_denoiser(
        net, pr.external_prior(), empty, train, schedule,
        external_values=np.empty(0), external_values_val=train.labels,
    )
    assert out is net


def test_finetune_stabilizes_and_updates_parameters(conjugate):
    net, schedule, mu0, _ = conjugate
    rng = np.random.default_rng(14)
    n = 400
    x = mu0 + 3.0 * rng.standard_normal(n)
    y = x + 2.0 * rng.standard_normal(n)
    tune = make_dataset(y[:200, None], x[:200], "finetune")
    val = make_dataset(y[200:, None], x[200:], "val")
    ext = np.full(200, mu0)
    out = df.finetune_denoiser(
        net, pr.external_prior(), tune, val, schedule,
        df.DiffusionFinetuneOptions(max_epochs=40, seed=0),
        external_values=ext, external_values_val=ext,
    )
    hist = out.history["finetune_val_loss"]
    assert out.history["finetune_stopped_epoch"] is not None
    assert len(hist) == out.history["finetune_stopped_epoch"] + 1
    assert np.all(np.isfinite(hist))
    assert params_bytes(out.params) != params_bytes(net.params)
    # the input net is not modified in place
    assert net.history.get("finetune_val_loss") is None


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip_preserves_everything(degen, tmp_path):
    net, train, schedule = degen
    base = tmp_path / "denoiser"
    df.save_denoiser(net, base)
    loaded = df.load_denoiser(base)
    assert params_bytes(loaded.params) == params_bytes(net.params)
    assert params_bytes(loaded.ema.shadow) == params_bytes(net.ema.shadow)
    assert loaded.ema.decay == net.ema.decay
    assert loaded.standardizer == net.standardizer
    assert loaded.featurizer == net.featurizer
    kw = dict(external_value=float(train.labels[0]))
    a = df.sample_posterior(
        net, pr.external_prior(), train.covariates[0], 6, schedule, seed=3, **kw
    )
    b = df.sample_posterior(
        loaded, pr.external_prior(), train.covariates[0], 6, schedule, seed=3, **kw
    )
    assert np.array_equal(a, b)


def test_checkpoint_tampering_is_detected(degen, tmp_path):
    net, _, _ = degen
    base = tmp_path / "denoiser"
    df.save_denoiser(net, base)
    blob = (tmp_path / "denoiser.ndn1").read_bytes()
    (tmp_path / "denoiser.ndn1").write_bytes(blob[:-8] + b"\x00" * 8)
    with pytest.raises(CheckpointError, match="hash"):
        df.load_denoiser(base)


def test_checkpoint_descriptor_format_is_checked(degen, tmp_path):
    import json

    net, _, _ = degen
    base = tmp_path / "denoiser"
    df.save_denoiser(net, base)
    desc = json.loads((tmp_path / "denoiser.json").read_text())
    desc["format"] = "something-else"
    (tmp_path / "denoiser.json").write_text(json.dumps(desc))
    with pytest.raises(CheckpointError, match="descriptor"):
        df.load_denoiser(base)
