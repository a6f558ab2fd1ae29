import math

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from genomic_interpreter.autodiff import Tape, Tensor, backward, grad_check
from genomic_interpreter.data import InteractionPair, SyntheticTaskSpec, generate_synthetic
from genomic_interpreter.errors import ConfigError, ContractError, NumericalError
from genomic_interpreter.metrics import (
    REPORT_SCHEMA, MetricsReport, evaluate, pearson, predict, report_from_predictions,
)
from genomic_interpreter.model import build, make_config
from genomic_interpreter.train import (
    AdamState, DomainError, LrSchedule, TrainHyper, adam_step, batch_order, clip_global_norm,
    cosine_lr, loss_and_grads, poisson_nll, train_loop,
)


def toy_task(count=24, seed=0):
    spec = SyntheticTaskSpec(
        n=32, m=4, tracks=2, bin_width=8,
        motifs={"g": "GGGG", "a": "AAAA", "c": "CCCC", "t": "TTTT"},
        weights={"g": [1.0, 0.0], "a": [0.5, 0.0]},
        pairs=[InteractionPair("c", "t", 10, [0.0, 1.0])],
        max_copies=2, track_groups=["DNase", "CAGE"],
    )
    ds = generate_synthetic(spec, count, seed)
    cfg = make_config(32, 4, 2, d_model=4, window=4, heads=2, depth=3, track_groups=spec.track_groups)
    return cfg, ds


# --- poisson loss ------------------------------------------------------------


def test_poisson_examples():
    assert poisson_nll(Tensor([[2.0]]), [[0.0]]).item() == 2.0
    p = Tensor([[1.0]], requires_grad=True)
    with Tape():
        loss = poisson_nll(p, [[1.0]])
    backward(loss)
    assert loss.item() == 1.0 and p.grad[0, 0] == 0.0


def test_poisson_gradient_formula(rng):
    pred, y = rng.random((4, 3)) + 0.1, rng.poisson(1.0, (4, 3)).astype(float)
    p = Tensor(pred, requires_grad=True)
    with Tape():
        loss = poisson_nll(p, y)
    backward(loss)
    np.testing.assert_allclose(p.grad, (1 - y / pred) / 12, rtol=1e-14)
    assert grad_check(lambda q: poisson_nll(q, y), [pred]) < 1e-8


def test_poisson_minimised_at_target():
    for y in (0.3, 1.0, 4.0):
        below = (1 - y / (y * 0.99))
        above = (1 - y / (y * 1.01))
        assert below < 0 < above


def test_poisson_domain_error():
    with pytest.raises(DomainError):
        poisson_nll(Tensor([[0.0, 1.0]]), [[1.0, 1.0]])


# --- adam, schedule, clipping -------------------------------------------------


def test_adam_zero_gradients_are_noop(rng):
    params = {"w": Tensor(rng.normal(size=(3, 2)), requires_grad=True)}
    new, state = adam_step(params, {"w": np.zeros((3, 2))}, AdamState(), 1e-2)
    np.testing.assert_array_equal(new["w"].data, params["w"].data)
    assert state.step == 1


def test_adam_constant_gradient_update_approaches_lr():
    params = {"w": Tensor(np.zeros(1), requires_grad=True)}
    state = AdamState()
    for _ in range(500):
        before = params["w"].data.copy()
        params, state = adam_step(params, {"w": np.array([0.7])}, state, 1e-3)
    step = before - params["w"].data
    assert state.step == 500
    # bias-corrected m/sqrt(v) -> g/|g|; eps keeps it a hair below 1
    np.testing.assert_allclose(step, 1e-3, rtol=1e-6)


def test_adam_first_step_is_lr_sign():
    new, _ = adam_step({"w": Tensor(np.zeros(2))}, {"w": np.array([3.0, -0.01])}, AdamState(), 0.1)
    np.testing.assert_allclose(new["w"].data, [-0.1, 0.1], rtol=1e-5)


def test_adam_nan_gradient_aborts():
    with pytest.raises(NumericalError, match="w"):
        adam_step({"w": Tensor(np.zeros(2))}, {"w": np.array([np.nan, 0.0])}, AdamState(), 0.1)


def test_adam_moment_shapes(rng):
    params = {"a": Tensor(np.zeros((2, 3))), "b": Tensor(np.zeros(4))}
    _, state = adam_step(params, {"a": np.ones((2, 3)), "b": np.ones(4)}, AdamState(), 0.1)
    assert state.m["a"].shape == (2, 3) and state.v["b"].shape == (4,)


def test_cosine_examples():
    s = LrSchedule(3e-4, 100, 1e-5)
    assert cosine_lr(0, s) == 3e-4
    assert cosine_lr(100, s) == 1e-5
    assert math.isclose(cosine_lr(50, s), (3e-4 + 1e-5) / 2, rel_tol=1e-12)
    assert cosine_lr(250, s) == 1e-5


def test_cosine_rejects_bad_tmax():
    with pytest.raises(ConfigError):
        LrSchedule(1e-3, 0)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 400), st.integers(1, 300), st.floats(0, 1e-4))
def test_cosine_in_range(step, t_max, eta_min):
    lr = cosine_lr(step, LrSchedule(3e-4, t_max, eta_min))
    assert eta_min - 1e-18 <= lr <= 3e-4 + 1e-18


def test_clip_global_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    clipped = clip_global_norm(grads, 1.0)
    np.testing.assert_allclose([clipped["a"][0], clipped["b"][0]], [0.6, 0.8])
    assert clip_global_norm(grads, 10.0) is grads
    assert clip_global_norm(grads, 0.0) is grads


# --- pearson and reports --------------------------------------------------------


def test_pearson_examples():
    assert pearson([1, 2, 3], [2, 4, 6]) == 1.0
    assert pearson([1, 2, 3], [3, 2, 1]) == -1.0
    assert math.isclose(pearson([1, 2, 3, 4], [1, 3, 2, 4]), 0.8, rel_tol=0, abs_tol=1e-15)


def test_pearson_constant_is_undefined():
    assert pearson([1, 1, 1], [1, 2, 3]) is None
    assert pearson([1, 2, 3], [5, 5, 5]) is None


def test_pearson_contract():
    with pytest.raises(ContractError):
        pearson([1, 2], [1, 2, 3])
    with pytest.raises(ContractError):
        pearson([1], [1])


@settings(max_examples=80, deadline=None)
@given(st.integers(3, 30), st.floats(0.01, 100), st.floats(-100, 100), st.integers(0, 10**6))
def test_pearson_affine_invariance(n, scale, shift, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=n), rng.normal(size=n)
    r = pearson(a, b)
    # centring loses about |shift| / scale ulps
    assert abs(pearson(a, scale * b + shift) - r) < 1e-12 * (1 + abs(shift) / scale)
    assert abs(pearson(scale * a + shift, b) - r) < 1e-12 * (1 + abs(shift) / scale)
    assert -1 <= r <= 1


def test_report_groups_match_recomputation(rng):
    groups = ["DNase", "CAGE", "DNase", "ChIP", "CAGE"]
    pred, target = rng.random((6, 3, 5)), rng.random((6, 3, 5))
    report = report_from_predictions(pred, target, groups)
    for g in set(groups):
        rs = []
        for t in range(5):
            if groups[t] == g:
                a, b = pred[:, :, t].ravel(), target[:, :, t].ravel()
                rs.append(np.corrcoef(a, b)[0, 1])
        assert abs(report.group_means[g] - np.mean(rs)) < 1e-12
    assert abs(report.overall - np.mean(report.per_track)) < 1e-12
    jsonschema.validate(report.to_dict(), REPORT_SCHEMA)


def test_report_excludes_undefined():
    report = MetricsReport.from_tracks([0.5, None, 0.1], ["DNase", "DNase", "CAGE"])
    assert report.undefined == [1]
    assert report.group_means == {"DNase": 0.5, "CAGE": 0.1}
    assert math.isclose(report.overall, 0.3)
    all_bad = MetricsReport.from_tracks([None, None], ["DNase", "CAGE"])
    assert all_bad.overall is None and all_bad.group_means == {"DNase": None, "CAGE": None}
    jsonschema.validate(all_bad.to_dict(), REPORT_SCHEMA)


def test_exact_predictions_give_one():
    cfg, ds = toy_task()
    report = report_from_predictions(ds.targets, ds.targets, ds.track_groups)
    assert report.per_track == [1.0, 1.0] and report.overall == 1.0


def test_constant_model_all_undefined():
    cfg, ds = toy_task()
    p = build(cfg, 0)
    p.head_w.data[...] = 0
    report = evaluate(p, cfg, ds)
    assert report.undefined == [0, 1] and report.overall is None


def test_evaluate_empty_dataset():
    cfg, ds = toy_task()
    with pytest.raises(ContractError):
        evaluate(build(cfg, 0), cfg, ds.subset([]))


def test_threaded_predict_matches_serial():
    cfg, ds = toy_task(40)
    p = build(cfg, 1)
    np.testing.assert_array_equal(predict(p, cfg, ds.onehot, batch_size=8, threads=3), predict(p, cfg, ds.onehot, batch_size=8, threads=1))


# --- training loop ---------------------------------------------------------------


def test_batch_order_epochs():
    batches = list(batch_order(10, 4, 5, 0))
    first_epoch = np.concatenate(batches)[:10]
    assert sorted(first_epoch) == list(range(10))
    assert [len(b) for b in batches] == [4] * 5


def test_zero_steps_returns_initial_params():
    cfg, ds = toy_task()
    res = train_loop(cfg, ds, None, TrainHyper(steps=0), seed=3)
    assert res.log == []
    init = build(cfg, 3).flat()
    for name, t in res.params.flat().items():
        np.testing.assert_array_equal(t.data, init[name].data)


def test_loss_decreases_on_fixed_batch():
    cfg, ds = toy_task()
    params = build(cfg, 0)
    x, y = ds.onehot[:8], ds.targets[:8]
    first, _ = loss_and_grads(params, cfg, x, y)
    state = AdamState()
    for _ in range(50):
        _, grads = loss_and_grads(params, cfg, x, y)
        flat, state = adam_step(params.flat(), clip_global_norm(grads, 1.0), state, 3e-3)
        params = type(params).from_flat(cfg, flat)
    last, _ = loss_and_grads(params, cfg, x, y)
    assert last < first


def test_training_is_deterministic():
    cfg, ds = toy_task()
    hyper = TrainHyper(steps=6, batch_size=4, eval_every=3)
    a = train_loop(cfg, ds, ds, hyper, seed=2)
    b = train_loop(cfg, ds, ds, hyper, seed=2)
    assert a.log == b.log
    assert [r[0] for r in a.log] == list(range(1, 7))
    assert [r[3] is not None for r in a.log] == [False, False, True, False, False, True]


def test_best_checkpoint_tracks_validation():
    cfg, ds = toy_task()
    res = train_loop(cfg, ds, ds, TrainHyper(steps=4, batch_size=4, eval_every=1), seed=0)
    vals = [r[3] for r in res.log]
    assert res.best_val == max(vals)
    assert abs(evaluate(res.best_params, cfg, ds).overall - res.best_val) < 1e-12


def test_incompatible_data_rejected():
    cfg, ds = toy_task()
    other = make_config(64, 4, 2, d_model=4, window=4, depth=3)
    with pytest.raises(ConfigError):
        train_loop(other, ds, None, TrainHyper(steps=1))


@pytest.mark.filterwarnings("ignore:invalid value")
def test_divergence_keeps_last_good():
    from genomic_interpreter.train import DivergenceError

    cfg, ds = toy_task()
    params = build(cfg, 0)
    params.head_b.data[...] = np.inf
    with pytest.raises(DivergenceError) as info:
        train_loop(cfg, ds, None, TrainHyper(steps=3), params=params)
    assert info.value.last_good is params
