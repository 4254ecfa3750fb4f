"""Substrate checks: forward arithmetic, gradients vs finite differences,
Adam recursion, EMA, checkpoint round trips."""
import numpy as np
import pytest

from xco2diff import ndnet
from xco2diff.ndnet import (
    AdamState,
    CheckpointError,
    Conv1d,
    Dense,
    Flatten,
    GradientError,
    LayerShapeError,
    MaxPool1d,
    NetworkSpec,
    adam_step,
    backward,
    copy_params,
    ema_update,
    forward,
    forward_cached,
    init_adam,
    init_ema,
    init_params,
    load_params,
    save_params,
)


def central_diff_grads(spec, params, x, target):
    """Independent oracle: central finite differences of the scalar MSE loss."""
    h = 1e-6

    def loss(p):
        y = forward(spec, p, x)
        return float(np.mean((y - target) ** 2))

    grads = []
    for li, layer in enumerate(params):
        g = {}
        for key, arr in layer.items():
            out = np.zeros_like(arr)
            flat = arr.reshape(-1)
            gflat = out.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = loss(params)
                flat[i] = orig - h
                down = loss(params)
                flat[i] = orig
                gflat[i] = (up - down) / (2 * h)
            g[key] = out
        grads.append(g)
    return grads


def analytic_mse_grads(spec, params, x, target):
    y, caches = forward_cached(spec, params, x)
    n = y.size
    grads, _ = backward(spec, params, caches, 2.0 * (y - target) / n)
    return grads


def max_rel_err(ga, gb):
    worst = 0.0
    for la, lb in zip(ga, gb):
        for key in la:
            denom = np.maximum(np.abs(la[key]) + np.abs(lb[key]), 1e-8)
            worst = max(worst, float(np.max(np.abs(la[key] - lb[key]) / denom)))
    return worst


# ---------------------------------------------------------------------------
# Forward arithmetic


def test_dense_identity_passthrough():
    spec = NetworkSpec((2,), (Dense(2, 2, activation="identity"),))
    params = [{"w": np.eye(2), "b": np.zeros(2)}]
    np.testing.assert_array_equal(forward(spec, params, np.array([3.0, 4.0])), [3.0, 4.0])


def test_relu_and_softplus_values():
    spec = NetworkSpec((2,), (Dense(2, 2, activation="relu"),))
    params = [{"w": np.eye(2), "b": np.zeros(2)}]
    np.testing.assert_array_equal(forward(spec, params, np.array([-1.0, 2.0])), [0.0, 2.0])

    spec_sp = NetworkSpec((1,), (Dense(1, 1, activation="softplus"),))
    params_sp = [{"w": np.ones((1, 1)), "b": np.zeros(1)}]
    got = forward(spec_sp, params_sp, np.array([0.0]))[0]
    assert got == pytest.approx(np.log(2.0), abs=1e-15)


def test_three_layer_forward_matches_straightline_arithmetic():
    # Oracle: the same arithmetic written out longhand, no layer machinery.
    rng = np.random.default_rng(7)
    spec = NetworkSpec(
        (4,),
        (Dense(4, 5, "relu"), Dense(5, 3, "softplus"), Dense(3, 2, "identity")),
    )
    params = init_params(spec, rng)
    x = rng.standard_normal(4)

    z1 = x @ params[0]["w"] + params[0]["b"]
    a1 = np.maximum(z1, 0.0)
    z2 = a1 @ params[1]["w"] + params[1]["b"]
    a2 = np.log1p(np.exp(z2))
    z3 = a2 @ params[2]["w"] + params[2]["b"]

    np.testing.assert_allclose(forward(spec, params, x), z3, rtol=0, atol=1e-12)


def test_conv_kernel1_equals_per_position_dense():
    rng = np.random.default_rng(3)
    conv = NetworkSpec((3, 10), (Conv1d(3, 4, kernel=1, activation="identity"),))
    cp = init_params(conv, rng)
    x = rng.standard_normal((3, 10))
    got = forward(conv, cp, x)
    want = np.einsum("oc,cl->ol", cp[0]["w"][:, :, 0], x) + cp[0]["b"][:, None]
    np.testing.assert_allclose(got, want, atol=1e-14)


def test_maxpool_and_flatten_shapes_and_values():
    spec = NetworkSpec((1, 4), (MaxPool1d(2), Flatten()))
    params = [{}, {}]
    out = forward(spec, params, np.array([[1.0, 5.0, 2.0, -3.0]]))
    np.testing.assert_array_equal(out, [5.0, 2.0])


def test_batched_and_single_forward_agree():
    rng = np.random.default_rng(11)
    spec = NetworkSpec(
        (2, 12),
        (Conv1d(2, 3, kernel=3), MaxPool1d(2), Flatten(), Dense(15, 4, "identity")),
    )
    params = init_params(spec, rng)
    xb = rng.standard_normal((6, 2, 12))
    yb = forward(spec, params, xb)
    assert yb.shape == (6, 4)
    for i in range(6):
        np.testing.assert_allclose(forward(spec, params, xb[i]), yb[i], atol=1e-14)


# ---------------------------------------------------------------------------
# Shape validation


def test_mismatched_dense_chain_raises_with_layer_index():
    with pytest.raises(LayerShapeError, match="layer 1"):
        NetworkSpec((4,), (Dense(4, 5), Dense(6, 2)))


def test_conv_after_flatten_raises():
    with pytest.raises(LayerShapeError, match="layer 1"):
        NetworkSpec((2, 8), (Flatten(), Conv1d(2, 2, kernel=3)))


def test_pool_window_must_divide_length():
    with pytest.raises(LayerShapeError):
        NetworkSpec((1, 7), (MaxPool1d(2),))


def test_forward_rejects_wrong_input_shape():
    spec = NetworkSpec((3,), (Dense(3, 2),))
    with pytest.raises(LayerShapeError):
        forward(spec, init_params(spec, np.random.default_rng(0)), np.zeros(4))


# ---------------------------------------------------------------------------
# Init distribution


def test_glorot_init_bounds_and_spread():
    rng = np.random.default_rng(42)
    spec = NetworkSpec((50,), (Dense(50, 30),))
    params = init_params(spec, rng)
    bound = np.sqrt(6.0 / 80.0)
    w = params[0]["w"]
    assert np.all(np.abs(w) <= bound)
    assert np.std(w) > 0.5 * bound / np.sqrt(3.0)  # not collapsed near zero
    np.testing.assert_array_equal(params[0]["b"], 0.0)


def test_init_is_seed_deterministic():
    spec = NetworkSpec((8,), (Dense(8, 8), Dense(8, 1)))
    a = init_params(spec, np.random.default_rng(123))
    b = init_params(spec, np.random.default_rng(123))
    for la, lb in zip(a, b):
        for key in la:
            np.testing.assert_array_equal(la[key], lb[key])


# ---------------------------------------------------------------------------
# Gradients vs central finite differences


GRAD_CASES = [
    ("dense_relu", NetworkSpec((5,), (Dense(5, 6, "relu"), Dense(6, 2, "identity")))),
    ("dense_softplus", NetworkSpec((4,), (Dense(4, 4, "softplus"), Dense(4, 3, "identity")))),
    (
        "conv_pool_stack",
        NetworkSpec(
            (2, 12),
            (
                Conv1d(2, 3, kernel=3, activation="relu"),
                MaxPool1d(2),
                Conv1d(3, 2, kernel=2, stride=2, activation="softplus"),
                Flatten(),
                Dense(4, 2, "identity"),
            ),
        ),
    ),
    (
        "strided_conv",
        NetworkSpec((1, 15), (Conv1d(1, 2, kernel=4, stride=3, activation="identity"), Flatten(), Dense(8, 1, "identity"))),
    ),
]


@pytest.mark.parametrize("name,spec", GRAD_CASES, ids=[c[0] for c in GRAD_CASES])
def test_backward_matches_central_differences(name, spec):
    rng = np.random.default_rng(hash(name) % 2**32)
    params = init_params(spec, rng)
    x = rng.standard_normal((3,) + spec.input_shape)
    target = rng.standard_normal((3,) + spec.output_shape)
    # keep relu inputs away from the kink so finite differences are clean
    got = analytic_mse_grads(spec, params, x, target)
    want = central_diff_grads(spec, params, x, target)
    assert max_rel_err(got, want) < 1e-6


def test_backward_input_gradient_matches_central_differences():
    rng = np.random.default_rng(5)
    spec = NetworkSpec((4,), (Dense(4, 3, "softplus"), Dense(3, 1, "identity")))
    params = init_params(spec, rng)
    x = rng.standard_normal(4)
    y, caches = forward_cached(spec, params, x)
    _, gx = backward(spec, params, caches, np.ones_like(y))

    h = 1e-6
    want = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        want[i] = (forward(spec, params, xp).sum() - forward(spec, params, xm).sum()) / (2 * h)
    np.testing.assert_allclose(gx, want, rtol=1e-6, atol=1e-9)


# ---------------------------------------------------------------------------
# Adam


def test_adam_first_step_matches_hand_recursion():
    # Oracle: the bias-corrected recursion evaluated by hand for one step.
    params = [{"w": np.array([[1.0, 2.0]]), "b": np.array([0.5])}]
    grads = [{"w": np.array([[0.1, -0.2]]), "b": np.array([0.3])}]
    state = init_adam(params, lr=0.01)
    adam_step(params, grads, state)

    for key, g in (("w", np.array([[0.1, -0.2]])), ("b", np.array([0.3]))):
        m = 0.1 * g
        v = 0.001 * g**2
        m_hat = m / (1 - 0.9)
        v_hat = v / (1 - 0.999)
        expect = {"w": np.array([[1.0, 2.0]]), "b": np.array([0.5])}[key] - 0.01 * m_hat / (
            np.sqrt(v_hat) + 1e-8
        )
        np.testing.assert_allclose(params[0][key], expect, atol=1e-12)


def test_adam_three_steps_match_reference_loop():
    rng = np.random.default_rng(9)
    spec = NetworkSpec((3,), (Dense(3, 2, "identity"),))
    params = init_params(spec, rng)
    ref_w = params[0]["w"].copy()
    ref_b = params[0]["b"].copy()
    state = init_adam(params, lr=0.05)

    m = {"w": np.zeros_like(ref_w), "b": np.zeros_like(ref_b)}
    v = {"w": np.zeros_like(ref_w), "b": np.zeros_like(ref_b)}
    ref = {"w": ref_w, "b": ref_b}
    for t in range(1, 4):
        grads = [{"w": rng.standard_normal(ref_w.shape), "b": rng.standard_normal(ref_b.shape)}]
        adam_step(params, grads, state)
        for key in ("w", "b"):
            g = grads[0][key]
            m[key] = 0.9 * m[key] + 0.1 * g
            v[key] = 0.999 * v[key] + 0.001 * g**2
            ref[key] = ref[key] - 0.05 * (m[key] / (1 - 0.9**t)) / (
                np.sqrt(v[key] / (1 - 0.999**t)) + 1e-8
            )
    np.testing.assert_allclose(params[0]["w"], ref["w"], atol=1e-12)
    np.testing.assert_allclose(params[0]["b"], ref["b"], atol=1e-12)


def test_adam_rejects_non_finite_gradients():
    params = [{"w": np.ones((2, 2)), "b": np.zeros(2)}]
    state = init_adam(params)
    bad = [{"w": np.array([[np.nan, 0.0], [0.0, 0.0]]), "b": np.zeros(2)}]
    with pytest.raises(GradientError):
        adam_step(params, bad, state)


def test_adam_descends_on_quadratic():
    # minimize ||w||^2; fifty steps should shrink the norm substantially
    params = [{"w": np.full((4, 4), 2.0), "b": np.zeros(4)}]
    state = init_adam(params, lr=0.1)
    for _ in range(50):
        grads = [{"w": 2.0 * params[0]["w"], "b": 2.0 * params[0]["b"]}]
        adam_step(params, grads, state)
    assert np.linalg.norm(params[0]["w"]) < 0.5 * np.linalg.norm(np.full((4, 4), 2.0))


# ---------------------------------------------------------------------------
# EMA


def test_ema_matches_scalar_recursion():
    params = [{"w": np.array([1.0])}]
    state = init_ema(params, decay=0.9)
    shadow = 1.0
    for step in range(5):
        params[0]["w"][0] = float(step)
        ema_update(state, params)
        shadow = 0.9 * shadow + 0.1 * step
        assert state.shadow[0]["w"][0] == pytest.approx(shadow, abs=1e-15)


def test_ema_shadow_is_independent_copy():
    params = [{"w": np.zeros(3)}]
    state = init_ema(params, decay=0.5)
    params[0]["w"] += 100.0
    np.testing.assert_array_equal(state.shadow[0]["w"], 0.0)


# ---------------------------------------------------------------------------
# Checkpoints


def test_checkpoint_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(77)
    spec = NetworkSpec(
        (2, 12),
        (Conv1d(2, 3, kernel=3), MaxPool1d(2), Flatten(), Dense(15, 4, "identity")),
    )
    params = init_params(spec, rng)
    # exercise non-trivial bit patterns
    params[0]["w"][0, 0, 0] = np.nextafter(0.1, 1.0)
    path = tmp_path / "net.ndn1"
    save_params(path, params)
    loaded = load_params(path)
    assert len(loaded) == len(params)
    for la, lb in zip(params, loaded):
        assert sorted(la) == sorted(lb)
        for key in la:
            assert la[key].tobytes() == lb[key].tobytes()


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "bogus.ndn1"
    path.write_bytes(b"XXXX" + b"\x00" * 16)
    with pytest.raises(CheckpointError, match="NDN1"):
        load_params(path)


def test_checkpoint_rejects_non_finite(tmp_path):
    params = [{"w": np.array([np.inf])}]
    with pytest.raises(CheckpointError):
        save_params(tmp_path / "x.ndn1", params)


def test_checkpoint_rejects_truncation(tmp_path):
    params = [{"w": np.arange(6.0).reshape(2, 3)}]
    path = tmp_path / "t.ndn1"
    save_params(path, params)
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        load_params(path)


def test_copy_params_is_deep():
    params = [{"w": np.zeros(2)}]
    dup = copy_params(params)
    dup[0]["w"] += 5
    np.testing.assert_array_equal(params[0]["w"], 0.0)
