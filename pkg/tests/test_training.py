import math

import numpy as np
import pytest

from _util import rel_err
from nhode.models import ObservationScheme
from nhode.systems import SystemSpec, derive_rng, generate_dataset, true_vector_field
from nhode.training import (
    AdamState,
    TrainConfig,
    TrainingDiverged,
    adam_step,
    build_encoder,
    build_model,
    checkpoint_from_bytes,
    checkpoint_to_bytes,
    load_checkpoint,
    observed_loss,
    save_checkpoint,
    split_dataset,
    train,
)

DMS = SystemSpec.dms()


@pytest.fixture(scope="module")
def dms_data():
    return generate_dataset(DMS, 50, 1.0, 101, seed=0)


def small_model(kind="nhode-pot", coords="abs", spec=DMS, seed=0):
    return build_model(kind, coords, spec, seed, width=16, depth=2)


def test_true_field_gives_near_zero_loss(dms_data):
    batch = dms_data.states[:16]
    res = observed_loss(small_model(), dms_data.scheme, batch, dms_data.times, TrainConfig(), grad=False,
                        field_override=lambda x: true_vector_field(DMS, x))
    assert res.value < 1e-8


def test_zero_length_rollout_is_zero(dms_data):
    res = observed_loss(small_model(), dms_data.scheme, dms_data.states[:4, :1], dms_data.times[:1],
                        TrainConfig())
    assert res.value == 0.0
    assert all(not g.any() for g in res.model_grads)


def _fd_check(loss_of, arrays, grads, n_coords=100, step=1e-6, seed=0):
    rng = np.random.default_rng(seed)
    sizes = [a.size for a in arrays]
    flat_idx = rng.choice(sum(sizes), size=min(n_coords, sum(sizes)), replace=False)
    offsets = np.cumsum([0] + sizes)
    got, want = [], []
    for gi in flat_idx:
        k = int(np.searchsorted(offsets, gi, side="right") - 1)
        j = gi - offsets[k]
        plus = [a.copy() for a in arrays]
        minus = [a.copy() for a in arrays]
        plus[k].reshape(-1)[j] += step
        minus[k].reshape(-1)[j] -= step
        want.append((loss_of(plus) - loss_of(minus)) / (2 * step))
        got.append(grads[k].reshape(-1)[j])
    return rel_err(got, want)


@pytest.mark.parametrize("kind,coords,spec", [
    ("nhode-pot", "abs", DMS),
    ("nhode-tot", "abs", DMS),
    ("nhode-tot", "rel", SystemSpec.nlms()),
    ("nhode-pot", "rel", SystemSpec.tbp()),
    ("node-vanilla", "rel", SystemSpec.nlms()),
    ("node-phys", "abs", DMS),
])
def test_model_gradient_matches_finite_differences(kind, coords, spec):
    ds = generate_dataset(spec, 4, 0.05, 6, seed=1)  # 5-step rollout
    model = small_model(kind, coords, spec)
    cfg = TrainConfig()
    res = observed_loss(model, ds.scheme, ds.states, ds.times, cfg)

    def loss_of(arrays):
        m = build_model(kind, coords, spec, 0, 16, 2)
        m.net = m.net.from_arrays(arrays)
        return observed_loss(m, ds.scheme, ds.states, ds.times, cfg, grad=False).value

    assert _fd_check(loss_of, model.net.arrays(), res.model_grads) < 1e-4


def test_encoder_gradient_matches_finite_differences():
    ds = generate_dataset(DMS, 4, 0.1, 11, seed=2)
    model = small_model()
    enc = build_encoder(ds.scheme, 3, 0, width=16, depth=2)
    cfg = TrainConfig(use_encoder=True, window=3)
    res = observed_loss(model, ds.scheme, ds.states, ds.times, cfg, enc)

    def loss_enc(arrays):
        e = build_encoder(ds.scheme, 3, 0, 16, 2)
        e.net = e.net.from_arrays(arrays)
        return observed_loss(model, ds.scheme, ds.states, ds.times, cfg, e, grad=False).value

    def loss_model(arrays):
        m = small_model()
        m.net = m.net.from_arrays(arrays)
        return observed_loss(m, ds.scheme, ds.states, ds.times, cfg, enc, grad=False).value

    assert _fd_check(loss_enc, enc.net.arrays(), res.encoder_grads) < 1e-4
    assert _fd_check(loss_model, model.net.arrays(), res.model_grads) < 1e-4


def test_adam_zero_gradient():
    p = [np.array([1.0, -2.0])]
    state = AdamState([np.array([0.5, 0.5])], [np.array([0.1, 0.1])], step=3)
    new_p, new_s = adam_step(p, [np.zeros(2)], state, 1e-3)
    assert new_s.step == 4
    np.testing.assert_array_equal(new_s.m[0], 0.9 * state.m[0])
    np.testing.assert_array_equal(new_s.v[0], 0.999 * state.v[0])
    # zero gradient from a fresh state leaves parameters untouched
    same, _ = adam_step(p, [np.zeros(2)], AdamState.zeros_like(p), 1e-3)
    np.testing.assert_array_equal(same[0], p[0])


def test_adam_first_step_closed_form():
    g = np.array([0.3, -4.0, 1e-9])
    p = [np.zeros(3)]
    new_p, _ = adam_step(p, [g], AdamState.zeros_like(p), 1e-3)
    want = -1e-3 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(new_p[0], want, rtol=1e-12)


def test_adam_constant_gradient_descends_monotonically():
    p, state = [np.array([5.0])], AdamState.zeros_like([np.zeros(1)])
    values = []
    for _ in range(50):
        p, state = adam_step(p, [np.array([2.0])], state, 1e-2)
        values.append(p[0][0])
    assert all(b < a for a, b in zip(values, values[1:]))


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step([np.zeros(2)], [np.zeros(3)], AdamState.zeros_like([np.zeros(2)]), 1e-3)


def test_learning_rate_schedule_exact():
    cfg = TrainConfig()
    for epoch in range(0, 1200, 7):
        assert cfg.learning_rate_at(epoch) == 1e-3 * 0.95 ** (epoch // 10)
    assert cfg.learning_rate_at(9) == 1e-3 and cfg.learning_rate_at(10) == 1e-3 * 0.95


def test_train_config_validation():
    for bad in (dict(train_fraction=1.0), dict(batch_size=0), dict(decay_rate=0.0), dict(method="tsit5-adaptive")):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_split(dms_data):
    ds = dms_data.subset(np.arange(20))
    big = generate_dataset(DMS, 100, 1.0, 3, seed=5)
    tr, va = split_dataset(big, 0.85, 3)
    assert (tr.n_traj, va.n_traj) == (85, 15)
    tr2, _ = split_dataset(big, 0.85, 3)
    assert tr.states.tobytes() == tr2.states.tobytes()
    rows = {r.tobytes() for r in big.states}
    got = [r.tobytes() for r in tr.states] + [r.tobytes() for r in va.states]
    assert len(set(got)) == 100 and set(got) == rows
    with pytest.raises(ValueError):
        split_dataset(ds.subset([0, 1]), 0.9, 0)
    with pytest.raises(ValueError):
        split_dataset(ds, 0.0, 0)


def test_smoke_training_reduces_loss(dms_data):
    cfg = TrainConfig(epochs=20, seed=0)
    model = build_model("nhode-pot", "abs", DMS, 0, width=32, depth=2)
    before = observed_loss(model, dms_data.scheme, dms_data.states, dms_data.times, cfg, grad=False).value
    result = train(model, None, dms_data, cfg)
    after = observed_loss(result.model, dms_data.scheme, dms_data.states, dms_data.times, cfg, grad=False).value
    assert after < before
    assert len(result.history) == 20
    assert all(math.isfinite(r.val_loss) for r in result.history)
    assert [r.learning_rate for r in result.history] == [cfg.learning_rate_at(e) for e in range(20)]
    # the input model is not mutated
    assert model.net.arrays()[0].tobytes() != result.model.net.arrays()[0].tobytes()


def test_training_is_deterministic(dms_data):
    cfg = TrainConfig(epochs=3, batch_size=16, seed=4)
    runs = [train(build_model("nhode-tot", "rel", DMS, 4, 16, 2), None, dms_data, cfg) for _ in range(2)]
    assert runs[0].history_csv() == runs[1].history_csv()
    assert all(a.tobytes() == b.tobytes() for a, b in zip(runs[0].model.net.arrays(), runs[1].model.net.arrays()))


def _poison(ds, from_step):
    bad = ds.subset(np.arange(ds.n_traj))
    bad.states = bad.states.copy()
    for i in ds.scheme.hidden:
        bad.states[:, from_step:, i] = np.nan
    return bad


def test_hidden_channels_never_read(dms_data):
    cfg = TrainConfig(epochs=2, batch_size=16, seed=1)
    clean = train(small_model(), None, dms_data, cfg)
    poisoned = train(small_model(), None, _poison(dms_data, 1), cfg)
    assert clean.history_csv() == poisoned.history_csv()
    assert all(math.isfinite(r.train_loss) for r in poisoned.history)

    ecfg = TrainConfig(epochs=2, batch_size=16, seed=1, use_encoder=True, window=5)
    enc = build_encoder(dms_data.scheme, 5, 1, 16, 2)
    clean = train(small_model(), enc, dms_data, ecfg)
    poisoned = train(small_model(), enc, _poison(dms_data, 0), ecfg)
    assert clean.history_csv() == poisoned.history_csv()


def test_encoder_input_map_fitted_on_training_split(dms_data):
    enc = build_encoder(dms_data.scheme, 5, 1, 16, 2)
    cfg = TrainConfig(epochs=0, use_encoder=True, window=5, seed=1)
    fitted = train(small_model(), enc, dms_data, cfg).encoder
    train_ds, _ = split_dataset(dms_data, cfg.train_fraction, cfg.seed)
    obs = list(dms_data.scheme.observed)
    flat = train_ds.states[:, :6][:, :, obs].reshape(train_ds.n_traj, -1)
    np.testing.assert_allclose(fitted.shift, flat.mean(axis=0), rtol=1e-12)
    assert enc.shift is None
    raw = train(small_model(), enc, dms_data, TrainConfig(epochs=0, use_encoder=True, window=5,
                                                          whiten_window=False)).encoder
    assert raw.shift is None


def test_encoder_required_when_requested(dms_data):
    with pytest.raises(ValueError):
        train(small_model(), None, dms_data, TrainConfig(epochs=1, use_encoder=True))


def test_divergence_aborts_after_three_epochs(dms_data):
    model = small_model("node-vanilla", "abs")
    model.net.weights[-1][:] = 1e300
    with pytest.raises(TrainingDiverged):
        train(model, None, dms_data, TrainConfig(epochs=10))


def test_checkpoint_round_trip(tmp_path):
    model = small_model()
    scheme = ObservationScheme.hide_particle(2, 1, 1)
    enc = build_encoder(scheme, 4, 0, 8, 1)
    cfg = TrainConfig(epochs=3, use_encoder=True, window=4)
    path = save_checkpoint(tmp_path / "m.nhck", model, enc, cfg, {"dataset_digest": "00ff"})
    ck = load_checkpoint(path)
    assert ck.header["train"]["epochs"] == 3 and ck.header["dataset_digest"] == "00ff"
    assert checkpoint_to_bytes(ck.model, ck.encoder, cfg, {"dataset_digest": "00ff"}) == path.read_bytes()
    fitted = train(model, enc, generate_dataset(DMS, 6, 0.1, 11, seed=0),
                   TrainConfig(epochs=1, batch_size=4, use_encoder=True, window=4)).encoder
    assert fitted.shift is not None
    back = checkpoint_from_bytes(checkpoint_to_bytes(model, fitted, cfg)).encoder
    np.testing.assert_array_equal(back.shift, fitted.shift)
    np.testing.assert_array_equal(back.mix, fitted.mix)
    with pytest.raises(ValueError):
        checkpoint_from_bytes(checkpoint_to_bytes(model, fitted, cfg)[:-8])
    plain = checkpoint_to_bytes(model, None, TrainConfig())
    assert checkpoint_from_bytes(plain).encoder is None
    with pytest.raises(ValueError):
        checkpoint_from_bytes(plain + b"\0")
    with pytest.raises(ValueError):
        checkpoint_from_bytes(b"XXXXXXXX" + plain[8:])


def test_named_rng_paths_are_independent():
    a = derive_rng(0, "init", "model").random(4)
    b = derive_rng(0, "init", "encoder").random(4)
    c = derive_rng(0, "init", "model").random(4)
    assert not np.array_equal(a, b) and np.array_equal(a, c)
