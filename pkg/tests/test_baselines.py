import numpy as np
import pytest

from aofp import netgraph as ng
from aofp.baselines import (
    EvalCounter,
    PruningCurve,
    apoz_score,
    index_order,
    magnitude_score,
    oracle_prune,
    oracle_score,
    pruning_curve,
    taylor_score,
)
from aofp.harness.data import DatasetDescriptor, load_dataset
from aofp.tensor import softmax_xent
from aofp.trainer import Dataset, TrainConfig, train


def _single_conv(width=4, relu=True, bias=True, shape=(5, 5, 2), classes=3):
    layers = [ng.LayerSpec(0, "conv", width=width, kernel=3, padding=1, predecessors=[-1], prunable=True)]
    if relu:
        layers.append(ng.LayerSpec(1, "relu", predecessors=[0]))
    n = len(layers)
    layers += [ng.LayerSpec(n, "flatten", predecessors=[n - 1]),
               ng.LayerSpec(n + 1, "fc", width=classes, predecessors=[n])]
    return ng.NetworkSpec(layers, shape, classes)


def _data(n, shape=(5, 5, 2), classes=3, seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    d = Dataset(rng.standard_normal((n, *shape)), rng.integers(0, classes, n))
    d.x = d.x.astype(dtype)
    return d


@pytest.fixture(scope="module")
def trained():
    spec = ng.preset("conv3-toy")
    s = load_dataset(DatasetDescriptor(n_assess=60))
    params = train(spec, None, s.train, TrainConfig.desk(300))
    return spec, params, s


# ---------------------------------------------------------------- oracle


def test_oracle_dead_filter_scores_zero():
    spec = _single_conv()
    params = ng.init_params(spec, 0)
    params["0.kernel"][..., 1] = 0
    params["0.bias"][1] = 0
    scores = oracle_score(spec, params, 0, _data(20))
    assert scores[1] == 0.0 and len(scores) == 4


def test_oracle_duplicate_filters_score_equal():
    spec = _single_conv()
    params = ng.init_params(spec, 1)
    params["0.kernel"][..., 2] = params["0.kernel"][..., 0]
    params["0.bias"][2] = params["0.bias"][0]
    w = params["3.weight"].reshape(5, 5, 4, 3)
    w[:, :, 2] = w[:, :, 0]
    scores = oracle_score(spec, params, 0, _data(20))
    assert scores[0] == pytest.approx(scores[2], rel=1e-5)


def test_oracle_matches_exhaustive_recomputation():
    spec = _single_conv()
    params = ng.init_params(spec, 2)
    data = _data(15, seed=3)
    scores = oracle_score(spec, params, 0, data)
    # physically zero each filter and recompute every example's loss
    base = sum(softmax_xent(ng.forward(spec, params, data.x[i : i + 1])[0], data.y[i : i + 1])[0]
               for i in range(len(data)))
    for j in range(4):
        p = params.copy()
        p["0.kernel"][..., j] = 0
        p["0.bias"][j] = 0
        after = sum(softmax_xent(ng.forward(spec, p, data.x[i : i + 1])[0], data.y[i : i + 1])[0]
                    for i in range(len(data)))
        assert scores[j] == pytest.approx(after - base, rel=1e-4, abs=1e-5)


def test_oracle_single_example_is_per_example_delta():
    spec = _single_conv()
    params = ng.init_params(spec, 4)
    one = _data(1, seed=5)
    scores = oracle_score(spec, params, 0, one)
    base = softmax_xent(ng.forward(spec, params, one.x)[0], one.y)[1][0]
    m = np.ones(4, np.float32)
    m[3] = 0
    after = softmax_xent(ng.forward(spec, params, one.x, {0: m})[0], one.y)[1][0]
    assert scores[3] == pytest.approx(float(after - base), abs=1e-6)


@pytest.mark.parametrize("c,q", [(4, 1), (4, 3), (6, 2), (8, 5)])
def test_oracle_evaluation_count(c, q):
    spec = _single_conv(width=c)
    params = ng.init_params(spec, 0)
    counter = EvalCounter()
    order = oracle_prune(spec, params, 0, q, _data(10), rescore=True, counter=counter)
    assert counter.masked == sum(c - k for k in range(q))
    assert len(order) == q and len(set(order)) == q


def test_oracle_q1_modes_agree():
    spec = _single_conv(width=6)
    params = ng.init_params(spec, 7)
    data = _data(30, seed=8)
    assert oracle_prune(spec, params, 0, 1, data, True) == oracle_prune(spec, params, 0, 1, data, False)


def test_oracle_prune_rejects_bad_q():
    spec = _single_conv()
    params = ng.init_params(spec, 0)
    for q in (0, 4):
        with pytest.raises(ValueError):
            oracle_prune(spec, params, 0, q, _data(5))


def test_rescoring_changes_order_on_correlated_filters(trained):
    spec, params, s = trained
    layer = spec.convs[0]
    q = spec[layer].width - 1
    greedy = oracle_prune(spec, params, layer, q, s.assess, rescore=True)
    fixed = oracle_prune(spec, params, layer, q, s.assess, rescore=False)
    assert greedy[0] == fixed[0]
    assert greedy != fixed


# ---------------------------------------------------------------- heuristics


def test_magnitude():
    spec = _single_conv()
    params = ng.init_params(spec, 0)
    params["0.kernel"][..., 0] = 0
    params["0.kernel"][..., 1] = 1
    s = magnitude_score(params, 0)
    assert s[0] == 0 and s[1] == 3 * 3 * 2
    k = params["0.kernel"][..., 2]
    assert s[2] == pytest.approx(sum(abs(float(v)) for v in k.ravel()), rel=1e-6)


def test_apoz_extremes_and_counting():
    spec = _single_conv(width=3)
    params = ng.init_params(spec, 0)
    params["0.kernel"][:] = 0
    params["0.bias"][:] = [1.0, -1.0, 0.0]
    data = _data(8)
    s = apoz_score(spec, params, 0, data)
    assert s[0] == 0.0 and s[1] == 1.0
    params = ng.init_params(spec, 3)
    s = apoz_score(spec, params, 0, data)
    out = ng.forward(spec, params, data.x, record=[1])[1][1]
    for j in range(3):
        zeros = sum(1 for v in out[..., j].ravel() if v == 0)
        assert s[j] == pytest.approx(zeros / out[..., j].size)


def test_taylor_trivial_zeros():
    spec = _single_conv(width=3)
    params = ng.init_params(spec, 0)
    params["0.kernel"][..., 0] = 0
    params["0.bias"][0] = -1  # relu output is zero
    params["3.weight"].reshape(5, 5, 3, 3)[:, :, 1] = 0  # no gradient reaches channel 1
    s = taylor_score(spec, params, 0, _data(10))
    assert s[0] == 0 and s[1] == 0 and s[2] > 0


def test_taylor_first_order_agreement():
    spec = _single_conv(width=3, relu=False)
    data = _data(20, seed=9, dtype=np.float64)
    n, hw = len(data), 25
    errs = []
    for eps in (1e-2, 1e-3):
        params = ng.init_params(spec, 1, dtype=np.float64)
        params["0.kernel"] *= eps
        params["0.bias"] *= eps
        exact = oracle_score(spec, params, 0, data)
        approx = taylor_score(spec, params, 0, data)
        errs.append(max(abs(approx[j] * n * hw - abs(exact[j])) / abs(exact[j]) for j in range(3)))
    # second-order remainder shrinks with the perturbation
    assert errs[1] < 0.05 and errs[1] < errs[0]


def test_index_order():
    assert index_order(3) == [0, 1, 2]
    assert index_order(1) == [0]
    assert index_order(5) == [0, 1, 2, 3, 4]


def test_metrics_permutation_equivariant():
    spec = _single_conv()
    params = ng.init_params(spec, 11)
    data = _data(12)
    perm = np.array([2, 0, 3, 1])
    p2 = params.copy()
    p2["0.kernel"] = params["0.kernel"][..., perm].copy()
    p2["0.bias"] = params["0.bias"][perm].copy()
    p2["3.weight"] = params["3.weight"].reshape(5, 5, 4, 3)[:, :, perm].reshape(-1, 3).copy()
    for fn in (lambda p: oracle_score(spec, p, 0, data), lambda p: magnitude_score(p, 0),
               lambda p: apoz_score(spec, p, 0, data), lambda p: taylor_score(spec, p, 0, data)):
        a, b = fn(params), fn(p2)
        for new, old in enumerate(perm):
            assert b[new] == pytest.approx(a[old], rel=1e-4, abs=1e-6)


# ---------------------------------------------------------------- curves


def test_curve_validation_and_csv():
    with pytest.raises(ValueError):
        PruningCurve("x", [(1, 0.5)], 10)
    with pytest.raises(ValueError):
        PruningCurve("x", [(0, 0.5), (0, 0.4)], 10)
    c = PruningCurve("index", [(0, 1.0), (1, 0.5), (2, 0.0)], 10)
    assert c.auc() == pytest.approx(0.5)
    assert c.to_csv().splitlines()[:2] == ["method,filters_pruned,top1", "index,0,1.000000"]


@pytest.mark.parametrize("method", ["oracle", "degraded", "magnitude", "apoz", "taylor", "index",
                                    "aofp_single_layer", "oracle_10x"])
def test_curve_protocol(trained, method):
    spec, params, s = trained
    layer = spec.convs[0]
    big = s.train.subset(np.arange(600))
    c = pruning_curve(spec, params, layer, method, s.assess, s.eval, assess_large=big, max_pruned=4)
    base = float(np.mean(ng.predict(spec, params, s.eval.x).argmax(1) == s.eval.y))
    assert c.points[0] == (0, base)
    assert [k for k, _ in c.points] == list(range(5))
    assert c.gamma == (600 if method == "oracle_10x" else len(s.assess))


def test_index_curve_is_filter_order(trained):
    spec, params, s = trained
    layer = spec.convs[0]
    c = pruning_curve(spec, params, layer, "index", s.assess, s.eval, max_pruned=3)
    m = np.ones(spec[layer].width, np.float32)
    m[:2] = 0
    acc = float(np.mean(ng.predict(spec, params, s.eval.x, {layer: m}).argmax(1) == s.eval.y))
    assert c.points[2][1] == acc


def test_curve_scores_ignore_eval_data(trained):
    spec, params, s = trained
    layer = spec.convs[0]
    other = s.train.subset(np.arange(100, 300))
    for method in ("oracle", "apoz", "taylor", "aofp_single_layer"):
        a = pruning_curve(spec, params, layer, method, s.assess, s.eval, max_pruned=3)
        b = pruning_curve(spec, params, layer, method, s.assess, other, max_pruned=3)
        assert a.order == b.order


def test_unknown_method(trained):
    spec, params, s = trained
    with pytest.raises(ValueError):
        pruning_curve(spec, params, spec.convs[0], "random", s.assess, s.eval)
    with pytest.raises(ValueError):
        pruning_curve(spec, params, spec.convs[0], "oracle_10x", s.assess, s.eval)
