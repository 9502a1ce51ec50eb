import copy
import math

import numpy as np
import pytest

from needleroll.lstm import (
    Adam,
    DegenerateOutput,
    Diverged,
    LstmModel,
    RollEstimator,
    TrainConfig,
    _forward_batch,
    _pad_batch,
    backward,
    batch_loss,
    estimate_roll,
    forward_step,
    init_model,
    load_model,
    roll_target,
    run_sequence,
    save_model,
    scale_features,
    sequence_rmse,
    train,
    zero_state,
)
from needleroll.plant import SensedTip


def small_model(hidden=4, input_size=8, seed=3, dropout=0.0):
    return init_model(input_size=input_size, hidden_size=hidden, z_max=75.0,
                      dropout_rate=dropout, seed=seed)


def random_sequences(rng, count, t_min, t_max, input_size=8):
    seqs = []
    for _ in range(count):
        t = int(rng.integers(t_min, t_max + 1))
        xs = rng.uniform(-1.0, 1.0, size=(t, input_size))
        angles = np.cumsum(rng.uniform(-0.3, 0.3, size=t))
        ys = np.column_stack([np.sin(angles), np.cos(angles)])
        seqs.append((xs, ys))
    return seqs


# ------------------------------------------------------------------ features

def test_scale_features_reference_point():
    x = scale_features([0.0, 0.0, 75.0], [0.0, 0.0, 1.0], 0.0, 75.0)
    assert np.allclose(x, [0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0])


def test_scale_features_angle_encoding_periodic():
    a = scale_features([1.0, 2.0, 3.0], [0.0, 0.0, 1.0], math.pi, 75.0)
    b = scale_features([1.0, 2.0, 3.0], [0.0, 0.0, 1.0], 7.0 * math.pi, 75.0)
    assert np.allclose(a, b, atol=1e-12)
    s, c = a[6], a[7]
    assert s * s + c * c == pytest.approx(1.0, abs=1e-12)


def test_scale_features_rejects_bad_scale():
    with pytest.raises(ValueError):
        scale_features([0.0, 0.0, 1.0], [0.0, 0.0, 1.0], 0.0, 0.0)


def test_roll_target_unit_norm():
    rng = np.random.default_rng(0)
    for _ in range(100):
        y = roll_target(rng.uniform(-10.0, 10.0))
        assert np.linalg.norm(y) == pytest.approx(1.0, abs=1e-12)


def test_estimate_roll_basic_angles():
    assert estimate_roll([0.0, 1.0]) == pytest.approx(0.0)
    assert estimate_roll([1.0, 0.0]) == pytest.approx(math.pi / 2.0)
    assert estimate_roll([0.6, 0.8]) == pytest.approx(estimate_roll([0.3, 0.4]))
    assert estimate_roll([0.0, -1.0]) == pytest.approx(math.pi)


def test_estimate_roll_degenerate():
    with pytest.raises(DegenerateOutput):
        estimate_roll([1e-7, -1e-7])


def test_roll_roundtrip_through_encoding():
    rng = np.random.default_rng(1)
    for _ in range(200):
        roll = rng.uniform(-math.pi, math.pi)
        assert estimate_roll(roll_target(roll)) == pytest.approx(roll, abs=1e-12)


# ------------------------------------------------------------------- forward

def test_zero_model_outputs_bias():
    m = small_model()
    for _, arr in m.params():
        arr[...] = 0.0
    m.b_out[...] = np.array([0.3, -0.7])
    _, y = forward_step(m, zero_state(m.hidden_size), np.zeros(8))
    assert np.allclose(y, [0.3, -0.7])


def test_eval_mode_ignores_dropout_rng():
    m = small_model(dropout=0.5)
    xs = np.random.default_rng(2).uniform(-1, 1, size=(9, 8))
    a = run_sequence(m, xs)
    b = run_sequence(m, xs, train_mode=False, dropout_rng=np.random.default_rng(7))
    assert np.array_equal(a, b)


def test_train_mode_requires_rng_and_uses_it():
    m = small_model(hidden=6, dropout=0.5)
    x = np.zeros(8)
    with pytest.raises(ValueError):
        forward_step(m, zero_state(6), x, train_mode=True)
    _, y1 = forward_step(m, zero_state(6), x, True, np.random.default_rng(1))
    _, y2 = forward_step(m, zero_state(6), x, True, np.random.default_rng(2))
    assert not np.allclose(y1, y2)


def reference_forward(model, xs):
    """Second, deliberately plain implementation: python scalar loops."""
    h_size = model.hidden_size

    def sig(v):
        return 1.0 / (1.0 + math.exp(-v))

    h = [0.0] * h_size
    c = [0.0] * h_size
    out = []
    for x in xs:
        z = []
        for r in range(4 * h_size):
            acc = model.b_g[r]
            for j in range(model.input_size):
                acc += model.w_x[r, j] * x[j]
            for j in range(h_size):
                acc += model.w_h[r, j] * h[j]
            z.append(acc)
        gi = [sig(z[r]) for r in range(h_size)]
        gf = [sig(z[h_size + r]) for r in range(h_size)]
        gg = [math.tanh(z[2 * h_size + r]) for r in range(h_size)]
        go = [sig(z[3 * h_size + r]) for r in range(h_size)]
        c = [gf[r] * c[r] + gi[r] * gg[r] for r in range(h_size)]
        h = [go[r] * math.tanh(c[r]) for r in range(h_size)]
        act = []
        for r in range(h_size):
            acc = model.b_fc[r]
            for j in range(h_size):
                acc += model.w_fc[r, j] * h[j]
            act.append(math.tanh(acc))
        y = []
        for r in range(2):
            acc = model.b_out[r]
            for j in range(h_size):
                acc += model.w_out[r, j] * act[j]
            y.append(acc)
        out.append(y)
    return np.array(out)


def test_forward_matches_independent_reference():
    rng = np.random.default_rng(3)
    m = small_model(hidden=5, seed=9)
    xs = rng.uniform(-1.0, 1.0, size=(12, 8))
    ours = run_sequence(m, xs)
    ref = reference_forward(m, xs)
    assert np.abs(ours - ref).max() < 1e-12


def test_batched_forward_matches_streaming_path():
    rng = np.random.default_rng(4)
    m = small_model(hidden=7, seed=5)
    seqs = random_sequences(rng, 5, 4, 20)
    xs, ys, mask = _pad_batch(seqs)
    cache = _forward_batch(m, xs, train_mode=False)
    for k, (x_seq, _) in enumerate(seqs):
        offline = run_sequence(m, x_seq)
        assert np.abs(cache["y"][k, :len(x_seq)] - offline).max() < 1e-12


# ---------------------------------------------------------------------- loss

def test_loss_zero_on_exact_match():
    pred = np.ones((2, 5, 2))
    mask = np.ones((2, 5))
    rmse, sse, n = batch_loss(pred, pred.copy(), mask)
    assert rmse == 0.0 and sse == 0.0 and n == 20


def test_loss_constant_offset():
    target = np.zeros((1, 6, 2))
    pred = target + 0.1
    mask = np.ones((1, 6))
    rmse, _, _ = batch_loss(pred, target, mask)
    assert rmse == pytest.approx(0.1, abs=1e-12)


def test_loss_matches_two_pass_reference():
    rng = np.random.default_rng(5)
    pred = rng.normal(size=(3, 8, 2))
    target = rng.normal(size=(3, 8, 2))
    mask = (rng.uniform(size=(3, 8)) < 0.7).astype(float)
    mask[:, 0] = 1.0
    rmse, _, _ = batch_loss(pred, target, mask)
    acc = []
    for b in range(3):
        for t in range(8):
            if mask[b, t]:
                acc.extend((pred[b, t] - target[b, t]) ** 2)
    assert rmse == pytest.approx(math.sqrt(sum(acc) / len(acc)), abs=1e-12)


# ----------------------------------------------------------------- gradients

def _batch_rmse(model, xs, ys, mask):
    cache = _forward_batch(model, xs, train_mode=False)
    rmse, _, _ = batch_loss(cache["y"], ys, mask)
    return rmse


def test_gradients_match_central_finite_differences():
    """Every parameter of a hidden-size-4, length-7 instance: analytic BPTT
    against central differences with 1e-5 perturbation, relative error
    below 1e-5."""
    rng = np.random.default_rng(6)
    model = small_model(hidden=4, seed=11)
    seqs = random_sequences(rng, 2, 5, 7)
    xs, ys, mask = _pad_batch(seqs)
    cache = _forward_batch(model, xs, train_mode=False)
    grads, rmse, _, _ = backward(model, cache, ys, mask)
    assert rmse > 0.0
    eps = 1e-5
    for name, arr in model.params():
        g = grads[name]
        flat = arr.reshape(-1)
        for idx in range(flat.size):
            keep = flat[idx]
            flat[idx] = keep + eps
            up = _batch_rmse(model, xs, ys, mask)
            flat[idx] = keep - eps
            down = _batch_rmse(model, xs, ys, mask)
            flat[idx] = keep
            fd = (up - down) / (2.0 * eps)
            a = g.reshape(-1)[idx]
            rel = abs(a - fd) / max(1e-8, abs(a) + abs(fd))
            assert rel < 1e-5, f"{name}[{idx}]: analytic {a} vs fd {fd}"


def test_gradients_with_dropout_match_finite_differences():
    # fixed dropout masks across evaluations: seed the generator identically
    rng = np.random.default_rng(7)
    model = small_model(hidden=4, seed=13, dropout=0.4)
    seqs = random_sequences(rng, 2, 4, 6)
    xs, ys, mask = _pad_batch(seqs)

    def loss_with_masks():
        cache = _forward_batch(model, xs, train_mode=True,
                               dropout_rng=np.random.default_rng(99))
        rmse, _, _ = batch_loss(cache["y"], ys, mask)
        return cache, rmse

    cache, _ = loss_with_masks()
    grads, _, _, _ = backward(model, cache, ys, mask)
    eps = 1e-5
    for name, arr in model.params():
        flat = arr.reshape(-1)
        for idx in range(0, flat.size, 7):  # spot-check a subset per tensor
            keep = flat[idx]
            flat[idx] = keep + eps
            up = loss_with_masks()[1]
            flat[idx] = keep - eps
            down = loss_with_masks()[1]
            flat[idx] = keep
            fd = (up - down) / (2.0 * eps)
            a = grads[name].reshape(-1)[idx]
            rel = abs(a - fd) / max(1e-8, abs(a) + abs(fd))
            assert rel < 1e-5, f"{name}[{idx}]"


def test_padding_content_does_not_affect_gradients():
    rng = np.random.default_rng(8)
    model = small_model(hidden=4, seed=17)
    seqs = random_sequences(rng, 2, 3, 7)
    xs, ys, mask = _pad_batch(seqs)
    cache = _forward_batch(model, xs, train_mode=False)
    grads_a, *_ = backward(model, cache, ys, mask)
    xs2 = xs.copy()
    ys2 = ys.copy()
    xs2[mask == 0.0] = 123.0  # garbage in the padded region
    ys2[mask == 0.0] = -55.0
    cache2 = _forward_batch(model, xs2, train_mode=False)
    grads_b, *_ = backward(model, cache2, ys2, mask)
    for name, _ in model.params():
        assert np.allclose(grads_a[name], grads_b[name], atol=1e-12)


def test_gradients_zero_at_exact_fit():
    model = small_model(hidden=4, seed=19)
    xs = np.random.default_rng(9).uniform(-1, 1, size=(1, 5, 8))
    mask = np.ones((1, 5))
    cache = _forward_batch(model, xs, train_mode=False)
    grads, rmse, _, _ = backward(model, cache, cache["y"].copy(), mask)
    assert rmse == 0.0
    for name, _ in model.params():
        assert np.all(grads[name] == 0.0)


def test_scaled_loss_scales_gradients():
    # gradients of 2*loss are twice the gradients of loss (checked by FD)
    rng = np.random.default_rng(10)
    model = small_model(hidden=4, seed=23)
    seqs = random_sequences(rng, 1, 6, 6)
    xs, ys, mask = _pad_batch(seqs)
    cache = _forward_batch(model, xs, train_mode=False)
    grads, *_ = backward(model, cache, ys, mask)
    eps = 1e-5
    flat = model.w_fc.reshape(-1)
    for idx in (0, 5, 11):
        keep = flat[idx]
        flat[idx] = keep + eps
        up = 2.0 * _batch_rmse(model, xs, ys, mask)
        flat[idx] = keep - eps
        down = 2.0 * _batch_rmse(model, xs, ys, mask)
        flat[idx] = keep
        fd = (up - down) / (2.0 * eps)
        assert fd == pytest.approx(2.0 * grads["w_fc"].reshape(-1)[idx], rel=1e-4)


# --------------------------------------------------------------------- adam

def test_adam_first_step_is_signed_learning_rate():
    model = small_model(hidden=4, seed=29)
    before = {name: arr.copy() for name, arr in model.params()}
    grads = {name: np.sign(np.random.default_rng(11).normal(size=arr.shape)) * 2.0
             for name, arr in model.params()}
    opt = Adam(model, learning_rate=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8)
    opt.apply(model, grads)
    for name, arr in model.params():
        step = before[name] - arr
        # first bias-corrected step is lr * g/(|g| + eps) ~= lr * sign(g)
        assert np.allclose(step, 1e-3 * np.sign(grads[name]), rtol=1e-6)


# ----------------------------------------------------------------- training

def toy_training_sequences():
    t = np.arange(80)
    xs = np.column_stack([
        np.sin(0.07 * t), np.cos(0.07 * t), t / 80.0,
        np.sin(0.21 * t), np.cos(0.21 * t), np.ones_like(t, dtype=float) * 0.3,
        np.sin(0.04 * t), np.cos(0.04 * t),
    ])
    angle = 0.9 * np.sin(0.07 * t) + 0.2 * np.sin(0.21 * t)
    ys = np.column_stack([np.sin(angle), np.cos(angle)])
    return [(xs, ys)]


def test_overfit_single_episode():
    seqs = toy_training_sequences()
    config = TrainConfig(epochs=2000, batch_size=1, hidden_size=8,
                         dropout_rate=0.0, seed=1)
    model, log = train(seqs, seqs, config)
    best = min(row.val_rmse for row in log)
    assert best < 0.02
    assert model.metadata["best_val_rmse"] == pytest.approx(best)


def test_training_log_deterministic():
    rng = np.random.default_rng(12)
    seqs = random_sequences(rng, 6, 10, 25)
    config = TrainConfig(epochs=4, batch_size=2, hidden_size=6,
                         dropout_rate=0.2, seed=7)
    _, log_a = train(seqs[:4], seqs[4:], config)
    _, log_b = train(seqs[:4], seqs[4:], config)
    assert log_a == log_b


def test_returned_model_is_best_on_validation():
    rng = np.random.default_rng(13)
    seqs = random_sequences(rng, 8, 10, 30)
    config = TrainConfig(epochs=6, batch_size=3, hidden_size=6,
                         dropout_rate=0.1, seed=3)
    model, log = train(seqs[:6], seqs[6:], config)
    vals = [row.val_rmse for row in log]
    assert sequence_rmse(model, seqs[6:]) == pytest.approx(min(vals), abs=1e-12)
    running = np.minimum.accumulate(vals)
    assert np.all(np.diff(running) <= 0.0 + 1e-15)


def test_train_raises_on_nonfinite_loss():
    xs = np.zeros((5, 8))
    ys = np.full((5, 2), np.inf)
    with pytest.raises(Diverged):
        train([(xs, ys)], [(xs, ys)], TrainConfig(epochs=1, hidden_size=4))


def test_train_rejects_empty_sets():
    with pytest.raises(ValueError):
        train([], [], TrainConfig(epochs=1))


def test_base_angle_periodicity_end_to_end():
    m = small_model(hidden=6, seed=31)
    rng = np.random.default_rng(14)
    pos = rng.uniform(0.0, 30.0, size=(15, 3))
    heading = np.tile([0.0, 0.0, 1.0], (15, 1))
    alphas = rng.uniform(-3.0, 3.0, size=15)
    xs_a = np.array([scale_features(p, h, a, 75.0)
                     for p, h, a in zip(pos, heading, alphas)])
    xs_b = np.array([scale_features(p, h, a + 6.0 * math.pi, 75.0)
                     for p, h, a in zip(pos, heading, alphas)])
    assert np.abs(run_sequence(m, xs_a) - run_sequence(m, xs_b)).max() < 1e-12


# ------------------------------------------------------------- streaming API

def test_streaming_matches_offline_bitwise():
    m = small_model(hidden=6, seed=37)
    rng = np.random.default_rng(15)
    est = RollEstimator(m)
    measures = []
    alphas = []
    for t in range(40):
        measures.append(SensedTip(position=rng.uniform(0, 50, size=3),
                                  heading=_unit(rng.normal(size=3))))
        alphas.append(rng.uniform(-5, 5))
    online = []
    for meas, alpha in zip(measures, alphas):
        pose = est.estimate(meas, alpha)
        online.append(est.last_roll)
    xs = np.array([scale_features(m_.position, m_.heading, a, m.z_max)
                   for m_, a in zip(measures, alphas)])
    offline = run_sequence(m, xs)
    offline_rolls = [estimate_roll(y) for y in offline]
    assert online == offline_rolls  # bit-identical, same code path


def _unit(v):
    v = np.asarray(v, dtype=float)
    v = v / np.linalg.norm(v)
    if v[2] < 0:
        v = -v
    return v


def test_streaming_reset_zeroes_state():
    m = small_model(hidden=6, seed=41)
    est = RollEstimator(m)
    meas = SensedTip(position=np.array([1.0, 2.0, 3.0]), heading=np.array([0.0, 0.0, 1.0]))
    first = est.estimate(meas, 0.3)
    est.estimate(meas, 1.0)
    est.reset()
    assert np.all(est.state.hidden == 0.0) and np.all(est.state.cell == 0.0)
    again = est.estimate(meas, 0.3)
    assert np.array_equal(first.R, again.R) and np.array_equal(first.p, again.p)


def test_streaming_pose_carries_sensed_heading_and_estimated_roll():
    from needleroll.se3 import decompose_roll

    m = small_model(hidden=6, seed=43)
    est = RollEstimator(m)
    heading = _unit(np.array([0.2, -0.1, 0.95]))
    meas = SensedTip(position=np.array([5.0, -2.0, 40.0]), heading=heading)
    pose = est.estimate(meas, 1.2)
    eta, roll = decompose_roll(pose.R)
    assert np.allclose(eta, heading, atol=1e-9)
    assert roll == pytest.approx(est.last_roll, abs=1e-12)
    assert np.allclose(pose.p, meas.position)


def test_streaming_degenerate_output_propagates():
    m = small_model(hidden=4)
    for _, arr in m.params():
        arr[...] = 0.0
    est = RollEstimator(m)
    meas = SensedTip(position=np.zeros(3), heading=np.array([0.0, 0.0, 1.0]))
    with pytest.raises(DegenerateOutput):
        est.estimate(meas, 0.0)


# ------------------------------------------------------------- serialization

def test_model_save_load_roundtrip(tmp_path):
    m = init_model(hidden_size=5, seed=47, metadata={"note": "roundtrip"})
    path = tmp_path / "model.json"
    save_model(m, path)
    loaded = load_model(path)
    for (name_a, arr_a), (name_b, arr_b) in zip(m.params(), loaded.params()):
        assert name_a == name_b
        assert np.array_equal(arr_a, arr_b)
    assert loaded.z_max == m.z_max
    assert loaded.dropout_rate == m.dropout_rate
    assert loaded.metadata["note"] == "roundtrip"
    xs = np.random.default_rng(16).uniform(-1, 1, size=(9, 8))
    assert np.array_equal(run_sequence(m, xs), run_sequence(loaded, xs))


def test_model_load_rejects_unknown_version(tmp_path):
    import json

    m = init_model(hidden_size=4, seed=53)
    path = tmp_path / "model.json"
    save_model(m, path)
    doc = json.loads(path.read_text())
    doc["schema_version"] = 99
    path.write_text(json.dumps(doc))
    with pytest.raises(ValueError):
        load_model(path)


def test_model_validate_rejects_bad_shapes():
    m = init_model(hidden_size=4, seed=59)
    m.w_fc = np.zeros((3, 4))
    with pytest.raises(ValueError):
        m.validate()
