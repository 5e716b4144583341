import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ttattack import nn
from ttattack.tta import TtaConfig, TtaServer, adapt_step, apply_defense


def frozen_params(model):
    return {k: v for k, v in model.params.items() if k not in model.adaptable}


def mean_entropy(model, x, mode="batch"):
    return float(nn.entropy_rows(nn.forward(model, x, mode=mode).probs.data).mean())


@pytest.fixture
def setup(rng):
    model = nn.init_model(6, 4, rng=rng)
    x = rng.normal(size=(16, 6))
    return model, x


def test_zero_lr_leaves_model_unchanged(setup):
    model, x = setup
    new, out = adapt_step(model, x, TtaConfig(lr=0.0))
    for k in model.params:
        assert np.array_equal(new.params[k], model.params[k])
    np.testing.assert_array_equal(out.logits.data, nn.forward(model, x, mode="batch").logits.data)


def test_saturated_logits_barely_move(setup):
    model, x = setup
    big = model.with_params({"fc2.weight": model.params["fc2.weight"] * 1e4})
    new, _ = adapt_step(big, x, TtaConfig(lr=1e-2))
    drift = max(np.max(np.abs(new.params[k] - big.params[k])) for k in big.adaptable)
    assert drift < 1e-8


@pytest.mark.parametrize("lr", [1e-2, 1e-4])
def test_tent_step_lowers_entropy(setup, lr):
    model, x = setup
    new, out = adapt_step(model, x, TtaConfig(lr=lr))
    assert mean_entropy(new, x) < mean_entropy(model, x)
    assert float(nn.entropy_rows(out.probs.data).mean()) == pytest.approx(mean_entropy(new, x), abs=1e-15)


@settings(max_examples=20)
@given(seed=st.integers(0, 10_000), method=st.sampled_from(["tent", "rpl", "entropy-filtered"]),
       defense=st.sampled_from(["none", "medbn", "ema"]))
def test_frozen_weights_never_change(seed, method, defense):
    rng = np.random.default_rng(seed)
    model = nn.init_model(5, 3, rng=rng)
    new, _ = adapt_step(model, rng.normal(size=(8, 5)), TtaConfig(method=method, defense=defense, lr=0.5))
    for k, v in frozen_params(model).items():
        assert np.array_equal(new.params[k], v)
    assert all(np.array_equal(new.buffers[k], v) for k, v in model.buffers.items())


@settings(max_examples=20)
@given(seed=st.integers(0, 10_000))
def test_small_step_never_raises_entropy(seed):
    rng = np.random.default_rng(seed)
    model = nn.init_model(5, 3, rng=rng)
    x = rng.normal(size=(10, 5))
    new, _ = adapt_step(model, x, TtaConfig(lr=1e-4))
    assert mean_entropy(new, x) <= mean_entropy(model, x) + 1e-15


def test_rpl_step_changes_bn_affine(setup):
    model, x = setup
    new, _ = adapt_step(model, x, TtaConfig(method="rpl", lr=0.1))
    assert any(not np.array_equal(new.params[k], model.params[k]) for k in model.adaptable)


def test_filter_with_infinite_threshold_equals_tent(setup):
    model, x = setup
    a, out_a = adapt_step(model, x, TtaConfig(method="tent", lr=0.05))
    b, out_b = adapt_step(model, x, TtaConfig(method="entropy-filtered", entropy_threshold=float("inf"), lr=0.05))
    for k in model.params:
        assert np.array_equal(a.params[k], b.params[k])
    assert np.array_equal(out_a.logits.data, out_b.logits.data)


def test_all_rows_filtered_is_a_no_op(setup, caplog):
    model, x = setup
    with caplog.at_level("INFO"):
        new, _ = adapt_step(model, x, TtaConfig(method="entropy-filtered", entropy_threshold=1e-9, lr=0.5))
    assert new is model
    assert "removed all" in caplog.text


def test_config_validation():
    for bad in (dict(method="sar"), dict(defense="cotta"), dict(lr=-1.0), dict(entropy_threshold=0.0),
                dict(gce_q=0.0), dict(gce_q=1.5), dict(ema_alpha=1.0)):
        with pytest.raises(ValueError):
            TtaConfig(**bad)
    assert TtaConfig().threshold_for(3) == pytest.approx(0.4 * np.log(3))


def test_batch_of_one_rejected(setup):
    model, x = setup
    with pytest.raises(ValueError):
        adapt_step(model, x[:1], TtaConfig())


def test_ema_zero_serves_latest(setup, rng):
    model, _ = setup
    server = TtaServer(model, TtaConfig(defense="ema", ema_alpha=0.0, lr=0.1))
    for _ in range(3):
        batch = rng.normal(size=(8, 6))
        out = server.step(batch)
        for k in model.params:
            assert np.array_equal(server.served_model.params[k], server.model.params[k])
    np.testing.assert_array_equal(out.logits.data, nn.forward(server.model, batch).logits.data)


def test_ema_near_one_stays_near_initial(setup, rng):
    model, _ = setup
    alpha, steps = 0.999, 5
    server = TtaServer(model, TtaConfig(defense="ema", ema_alpha=alpha, lr=0.1))
    history = [server.model]
    for _ in range(steps):
        server.step(rng.normal(size=(8, 6)))
        history.append(server.model)
    max_update = max(np.max(np.abs(history[-1].params[k] - model.params[k])) for k in model.adaptable)
    drift = max(np.max(np.abs(server.served_model.params[k] - model.params[k])) for k in model.adaptable)
    assert drift < (1 - alpha) * steps * max_update
    applied = apply_defense(history, server.config)
    for k in model.adaptable:
        np.testing.assert_allclose(applied.params[k], server.served_model.params[k], rtol=0, atol=1e-15)


def test_medbn_resists_outlier():
    rng = np.random.default_rng(0)
    model = nn.init_model(1, 2, hidden=(1,), rng=rng)
    model = model.with_params({"fc0.weight": np.ones((1, 1))})
    clean = rng.normal(size=(9, 1))
    dirty = np.vstack([clean[:-1], [[1e3]]])
    shift = {}
    for mode in ("batch", "median"):
        c0 = nn.forward(model, clean, mode=mode).bn_stats[0][0].data.item()
        c1 = nn.forward(model, dirty, mode=mode).bn_stats[0][0].data.item()
        shift[mode] = abs(c1 - c0)
    assert shift["median"] < shift["batch"]


def test_medbn_defense_adapts_in_median_mode(setup):
    model, x = setup
    server = TtaServer(model, TtaConfig(defense="medbn"))
    out = server.step(x)
    assert server.served_model.bn_mode == "median"
    np.testing.assert_array_equal(out.logits.data, nn.forward(server.model, x).logits.data)


@settings(max_examples=20)
@given(seed=st.integers(0, 10_000), half=st.integers(1, 5))
def test_median_equals_mean_on_symmetric_batch(seed, half):
    rng = np.random.default_rng(seed)
    model = nn.init_model(1, 3, hidden=(4,), rng=rng)
    offsets = rng.uniform(0.1, 2.0, size=half)
    x = np.concatenate([-offsets, [0.0], offsets]).reshape(-1, 1) + 0.5
    a = nn.forward(model, x, mode="batch").logits.data
    b = nn.forward(model, x, mode="median").logits.data
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)
