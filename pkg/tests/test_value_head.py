import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from apps_sampler.exceptions import ConfigurationError, InputError, TrainingError
from apps_sampler.harness import planted_setup
from apps_sampler.value_head import (
    LOSS_TERMS,
    AdamW,
    SupervisionSet,
    TrainConfig,
    ValueHead,
    ValueHeadRegressor,
    collect_supervision,
    composite_loss,
    cosine_lr,
    effective_target,
    ema_update,
    evaluate,
    group_metrics,
    head_loss,
    pad_groups,
    train,
    transform,
    _group_index,
)

from conftest import finite_difference_error, linear_supervision


# ---------------------------------------------------------------- targets


def test_effective_target_examples():
    assert np.array_equal(effective_target([2.0, 2.0, 2.0]), np.zeros(3))
    assert np.allclose(effective_target([1.0, 3.0], 0.4, np.inf), [-0.4, 0.4])
    assert np.allclose(effective_target([0.0, 100.0], 0.4, 5.0), [-2.0, 2.0])
    with pytest.raises(InputError):
        effective_target([1.0])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=10), st.floats(-100, 100))
def test_effective_target_shift_invariant(y, c):
    assert np.allclose(effective_target(y), effective_target(np.array(y) + c), atol=1e-9)


def test_transform_is_groupwise():
    v = np.array([1.0, 3.0, 10.0, 10.0, 16.0])
    g = np.array([7, 7, 2, 2, 2])
    assert np.allclose(transform(v, g, 1.0, np.inf), [-1, 1, -2, -2, 4])
    z = transform(v, g, 1.0, np.inf, "standardized")
    assert np.allclose(z[:2], [-1, 1])


# ---------------------------------------------------------------- network


def test_zero_head_outputs_zero():
    head = ValueHead.zeros(5)
    assert np.array_equal(head.predict(np.random.default_rng(0).normal(size=(7, 5))), np.zeros(7))


def test_eval_forward_is_deterministic():
    head = ValueHead.init(4, seed=2)
    X = np.random.default_rng(1).normal(size=(9, 4))
    assert np.array_equal(head.predict(X), head.predict(X))


def test_head_dimension_mismatch():
    with pytest.raises(ConfigurationError):
        ValueHead.init(4).predict(np.zeros((2, 3)))


def test_head_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    for draw in range(10):
        head = ValueHead.init(5, 8, seed=draw)
        for p in head.params.values():
            p += rng.normal(scale=0.3, size=p.shape)
        X = rng.normal(size=(6, 5))
        c = rng.normal(size=6)
        out, cache = head.forward(X)
        grads = head.backward(cache, c)
        err = finite_difference_error(lambda: float(c @ head.forward(X)[0]), head.params, grads, 20, rng)
        assert err <= 1e-4


def test_head_save_load_round_trip(tmp_path):
    head = ValueHead.init(3, 5, seed=1, eta_distill=0.3, clip=2.0)
    path = tmp_path / "head.json"
    head.save(path)
    again = ValueHead.load(path)
    X = np.random.default_rng(0).normal(size=(4, 3))
    assert np.array_equal(head.predict(X), again.predict(X))
    assert again.eta_distill == 0.3 and again.clip == 2.0
    assert json.loads(path.read_text())["n_features"] == 3


# ---------------------------------------------------------------- loss


def test_loss_vanishes_at_the_target():
    t = np.array([[0.4, -0.4, 0.0], [1.0, -1.0, 0.0]])
    mask = np.array([[1, 1, 1], [1, 1, 0]], bool)
    _, terms, grad = composite_loss(t, t, mask)
    assert terms[0] == 0 and terms[1] == 0 and abs(terms[3]) < 1e-15
    assert np.allclose(grad[:, :] * 0, 0)
    # listwise term is at its minimum: gradient of term 3 vanishes
    _, _, g3 = composite_loss(t, t, mask, loss_weights=(0, 0, 1, 0, 0))
    assert np.allclose(g3, 0, atol=1e-15)
    # perturbing away from the target raises terms 1-4
    _, terms2, _ = composite_loss(t + np.array([[0.3, -0.2, 0.1], [-0.5, 0.5, 0]]), t, mask)
    assert np.all(terms2[:4] > terms[:4])


def test_top1_term_is_at_its_infimum_direction():
    t = np.array([[1.0, -1.0]])
    mask = np.ones((1, 2), bool)
    vals = [composite_loss(s * t, t, mask, loss_weights=(0, 0, 0, 0, 1))[0] for s in (1, 2, 4)]
    assert vals[0] > vals[1] > vals[2]


def test_pairwise_threshold():
    t = np.array([[3.0, -3.0]])
    mask = np.ones((1, 2), bool)
    good = composite_loss(np.array([[2.0, -2.0]]), t, mask)[1][LOSS_TERMS.index("pairwise")]
    bad = composite_loss(np.array([[-2.0, 2.0]]), t, mask)[1][LOSS_TERMS.index("pairwise")]
    assert good < math.log(2) < bad


def test_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0], [1, 1, 1, 0]], bool)
    for _ in range(20):
        pred = {"p": rng.normal(size=mask.shape)}
        t = rng.normal(size=mask.shape)
        for lw in np.eye(5).tolist() + [[1, 1, 1, 1, 1]]:
            _, _, g = composite_loss(pred["p"], t, mask, loss_weights=lw)
            err = finite_difference_error(lambda: composite_loss(pred["p"], t, mask, loss_weights=lw)[0], pred,
                                          {"p": g}, 10, rng, floor=1e-8)
            assert err <= 1e-4


def test_head_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    for mode in ("decode-aligned", "standardized"):
        data = linear_supervision(5, 4, 3, seed=1)
        gidx, n = _group_index(data.groups)
        target = transform(data.log_psi, data.groups, 0.4, 5.0, mode)
        tp, mask, scatter = pad_groups(target, gidx, n)
        head = ValueHead.init(3, 6, seed=0, target_mode=mode)
        for p in head.params.values():
            p += rng.normal(scale=0.5, size=p.shape)
        _, _, grads = head_loss(head, data.features, tp, mask, scatter, (1, 1, 1, 1, 1))
        fn = lambda: head_loss(head, data.features, tp, mask, scatter, (1, 1, 1, 1, 1))[0]
        assert finite_difference_error(fn, head.params, grads, 40, rng) <= 1e-4


# ---------------------------------------------------------------- optimisation


def test_zero_learning_rate_changes_nothing():
    data = linear_supervision(40, 4, 3)
    res = train(data, TrainConfig(learning_rate=0.0, max_epochs=3, dropout=0.0), seed=0)
    init = ValueHead.init(3, 64, 0)
    for k in init.params:
        assert np.array_equal(res.head.params[k], init.params[k])
    assert len({row["val_top1"] for row in res.history}) == 1
    assert len({row["val_loss"] for row in res.history}) == 1


def test_ema_converges_geometrically():
    shadow = {"a": np.array([1.0])}
    target = {"a": np.array([0.0])}
    for n in range(1, 50):
        ema_update(shadow, target, 0.9)
        assert shadow["a"][0] == pytest.approx(0.9**n)


def test_cosine_schedule():
    assert cosine_lr(1.0, 0, 10) == 1.0
    assert cosine_lr(1.0, 5, 10) == pytest.approx(0.5)
    assert cosine_lr(1.0, 10, 10) == pytest.approx(0.0)


def test_adamw_skips_bias_decay():
    params = {"W1": np.ones((1, 1)), "b1": np.ones(1), "w2": np.ones(1), "b2": np.ones(())}
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    AdamW(params, 0.5).step(params, grads, 0.1)
    assert params["W1"][0, 0] == pytest.approx(0.95) and params["b1"][0] == 1.0 and params["b2"] == 1.0


def test_non_finite_loss_raises():
    data = linear_supervision(20, 4, 3)
    data.log_psi[0] = np.inf
    with pytest.raises(TrainingError), np.errstate(all="ignore"):
        train(data, TrainConfig(max_epochs=2), seed=0)


def test_train_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(ema_decay=1.0)
    with pytest.raises(ConfigurationError):
        TrainConfig(loss_weights=(1, 1, 1))
    with pytest.raises(ConfigurationError):
        TrainConfig(dropout=1.0)


def test_history_columns_and_csv():
    res = train(linear_supervision(30, 3, 2), TrainConfig(max_epochs=4), seed=1)
    assert len(res.history) == 4 and 1 <= res.best_epoch <= 4
    header = res.history_csv().splitlines()[0].split(",")
    assert header[:3] == ["epoch", "lr", "train_loss"]
    assert {f"train_{t}" for t in LOSS_TERMS} <= set(header) and "val_top1" in header


# ---------------------------------------------------------------- data


def test_split_keeps_groups_whole():
    data = linear_supervision(50, 3, 2)
    tr, va = data.split(0.2, seed=3)
    assert not set(tr.groups) & set(va.groups)
    assert len(tr) + len(va) == len(data) and len(va.group_ids) == 10


def test_drop_degenerate():
    data = SupervisionSet(np.zeros((5, 1)), np.arange(5.0), [0, 0, 1, 2, 2])
    assert sorted(set(data.drop_degenerate().groups)) == [0, 2]


def test_jsonl_round_trip():
    data = linear_supervision(4, 3, 2)
    again = SupervisionSet.from_jsonl(data.to_jsonl())
    assert np.array_equal(again.features, data.features) and np.array_equal(again.log_psi, data.log_psi)
    assert np.array_equal(again.groups, data.groups)
    with pytest.raises(InputError):
        SupervisionSet.from_jsonl("")


def test_collection_group_structure():
    model, cfg, rollout = planted_setup(4)
    data = collect_supervision(model, [()], cfg, rollout, seeds=[0], dedupe=False)
    ids, counts = np.unique(data.groups, return_counts=True)
    assert counts[0] == 4 and np.all(counts == 4)
    assert data.features.shape[1] == 4


def test_collection_is_reproducible():
    model, cfg, rollout = planted_setup(8)
    a = collect_supervision(model, [()], cfg, rollout, seeds=[1, 2]).to_jsonl()
    b = collect_supervision(model, [()], cfg, rollout, seeds=[1, 2]).to_jsonl()
    assert a == b


def test_collection_dedupes_states():
    model, cfg, rollout = planted_setup(8)
    data = collect_supervision(model, [()], cfg, rollout, seeds=[0])
    # planted states: at most one trap and one diffuse state per position
    for g in data.group_ids:
        feats = data.features[data.groups == g]
        assert len({tuple(f) for f in feats}) == len(feats)


# ---------------------------------------------------------------- metrics


def test_metrics_examples():
    rng = np.random.default_rng(0)
    groups = np.repeat(np.arange(400), 4)
    t = rng.normal(size=groups.size)
    m = group_metrics(t, t, groups)
    assert m["top1"] == 1.0 and m["pairwise"] == 1.0 and m["pearson"] == pytest.approx(1.0)
    assert group_metrics(-t, t, groups)["pearson"] == pytest.approx(-1.0)
    c = group_metrics(np.zeros_like(t), t, groups, seed=5)
    # 6 pairs per group, each a fair coin
    assert abs(c["pairwise"] - 0.5) < 3 * math.sqrt(0.25 / (6 * 400))
    assert abs(c["top1"] - 0.25) < 3 * math.sqrt(0.25 * 0.75 / 400)


def test_evaluate_uses_the_decode_transform():
    data = linear_supervision(20, 4, 3)
    head = ValueHead.init(3, 4, 0)
    pred = head.decode(head.predict(data.features), data.groups)
    target = transform(data.log_psi, data.groups, head.eta_distill, head.clip)
    assert evaluate(head, data) == group_metrics(pred, target, data.groups)


# ---------------------------------------------------------------- estimator


def test_regressor_api():
    data = linear_supervision(300, 4, 3, seed=2)
    est = ValueHeadRegressor(max_epochs=30, batch_size=64, random_state=0)
    assert clone(est).get_params() == est.get_params()
    est.fit(data.features, data.log_psi, data.groups)
    assert est.predict(data.features).shape == (len(data),)
    assert est.score(data.features, data.log_psi, data.groups) > 0.7
    assert est.transform_scores(data.features, data.groups).shape == (len(data),)
    with pytest.raises(InputError):
        est.fit(data.features, data.log_psi)
