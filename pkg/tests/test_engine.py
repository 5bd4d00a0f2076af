import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aofp import netgraph as ng
from aofp.engine import (
    AofpConfig,
    LayerPruningState,
    MissingSamples,
    aofp_run,
    estimate_importance,
    isolated_damage,
    refine_step,
    sample_ablation,
    scoring_pass,
    successor_chain,
)
from aofp.trainer import Dataset

from oracles import damage_sum


def _state(width, records=None):
    s = LayerPruningState.fresh(0, width)
    s.clear_records()
    if records:
        for j, ts in records.items():
            s.records[j] = list(ts)
    return s


# ---------------------------------------------------------------- sampling


def test_sample_sizes():
    rng = np.random.default_rng(0)
    assert len(sample_ablation(range(64), rng)) == 32
    assert list(sample_ablation([5], rng)) == [5]
    assert len(sample_ablation(range(7), rng)) == 3
    with pytest.raises(ValueError):
        sample_ablation([], rng)


def test_sample_subset_of_search_space():
    rng = np.random.default_rng(1)
    space = [2, 3, 7, 11, 13]
    for _ in range(100):
        assert set(sample_ablation(space, rng)) <= set(space)


def test_sample_inclusion_frequency():
    rng = np.random.default_rng(2)
    counts = np.zeros(8)
    for _ in range(10_000):
        counts[sample_ablation(range(8), rng)] += 1
    np.testing.assert_allclose(counts / 10_000, 0.5, atol=0.05)


# ---------------------------------------------------------------- isolated damage


def test_damage_identities():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((4, 4, 3)).astype(np.float32)
    assert isolated_damage(a, a) == 0.0
    assert isolated_damage(a, np.zeros_like(a)) == 1.0
    assert isolated_damage(np.zeros_like(a), a) is None
    with pytest.raises(ValueError):
        isolated_damage(a, a[:2])


@pytest.mark.parametrize("seed", range(10))
def test_damage_matches_summation_oracle(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((2, 4, 4, 3))
    assert isolated_damage(a, b) == pytest.approx(damage_sum(a, b), rel=1e-6)


def test_damage_per_example_toggle():
    a = np.array([[1.0, 0.0], [0.0, 2.0]])
    b = np.array([[0.0, 0.0], [0.0, 2.0]])
    assert isolated_damage(a, b) == pytest.approx(1 / 5)
    assert isolated_damage(a, b, per_example=True) == pytest.approx(0.5)


# ---------------------------------------------------------------- estimates and decisions


def test_estimate_mean():
    s = _state(2, {0: [0.1, 0.3], 1: [0.7, 0.7, 0.7]})
    est = estimate_importance(s)
    assert est[0] == pytest.approx(0.2) and est[1] == pytest.approx(0.7)


def test_estimate_requires_samples():
    s = _state(3, {0: [0.1], 1: [0.2]})
    with pytest.raises(MissingSamples):
        estimate_importance(s)


def test_estimate_replay_oracle():
    rng = np.random.default_rng(4)
    s = _state(10)
    for _ in range(200):
        h = sample_ablation(s.search_space, rng)
        s.record(h, float(rng.random()))
    # rebuild the means from the raw ablation log
    sums, counts = np.zeros(10), np.zeros(10)
    for h, t in s.history:
        for j in h:
            sums[j] += t
            counts[j] += 1
    est = estimate_importance(s)
    for j in range(10):
        assert abs(est[j] - sums[j] / counts[j]) <= 1e-12


def test_refine_prunes_when_below_threshold():
    s = _state(4, {0: [0.015], 1: [0.5], 2: [0.001], 3: [0.9]})
    d = refine_step(s, 0.02)
    assert d.kind == "pruned" and d.picked == [0, 2] and d.p == pytest.approx(0.015)
    assert list(s.base_mask) == [0, 1, 0, 1] and list(s.scoring_mask) == [0, 1, 0, 1]
    assert s.search_space == [1, 3] and all(not r for r in s.records.values())


def test_refine_halves_when_above_threshold():
    s = _state(64, {j: [j / 100] for j in range(64)})
    d = refine_step(s, 0.0)
    assert d.kind == "refined" and len(d.picked) == 32 and s.search_space == list(range(32))
    assert s.base_mask.all()


def test_refine_single_pick_finishes():
    s = _state(2, {0: [0.5], 1: [0.6]})
    d = refine_step(s, 0.02)
    assert d.kind == "layer_finished" and d.picked == [0]


def test_refine_ties_prefer_lower_index():
    s = _state(4, {j: [0.3] for j in range(4)})
    assert refine_step(s, 0.0).picked == [0, 1]


def test_refine_cannot_empty_a_layer():
    s = _state(1, {0: [0.0]})
    with pytest.raises(ng.EmptyLayerError):
        refine_step(s, float("inf"))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 200), st.integers(0, 2**31 - 1))
def test_halving_sequence(width, seed):
    rng = np.random.default_rng(seed)
    s = _state(width)
    sizes = []
    while True:
        for j in s.search_space:
            s.records[j] = [float(rng.random())]
        n = len(s.search_space)
        d = refine_step(s, 0.0)
        assert len(d.picked) == max(1, n // 2)
        sizes.append(len(d.picked))
        if d.kind == "layer_finished":
            break
    assert sizes[-1] == 1


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 100), st.integers(0, 2**31 - 1))
def test_infinite_threshold_prunes_to_one(width, seed):
    rng = np.random.default_rng(seed)
    s = _state(width)
    prev = width
    while s.phase == "searching":
        for j in s.search_space:
            s.records[j] = [float(rng.random())]
        d = refine_step(s, float("inf"))
        assert d.kind == "pruned"
        now = int(s.base_mask.sum())
        assert 1 <= now < prev
        prev = now
        # permanently masked bits stay masked on both masks
        assert np.all(s.scoring_mask[s.base_mask == 0] == 0)
    assert s.base_mask.sum() == 1


# ---------------------------------------------------------------- scoring path


def _toy_net(seed=0, widths=(6, 5, 4)):
    spec = ng.build_vgg_cifar(widths, (1, 1, 1), (8, 8, 2), 3)
    rng = np.random.default_rng(seed)
    params = ng.init_params(spec, seed)
    for l in spec.layers:
        if l.kind == "bn":
            c = params[f"{l.id}.gamma"].shape[0]
            params[f"{l.id}.gamma"] = rng.uniform(0.5, 1.5, c).astype(np.float32)
            params[f"{l.id}.beta"] = rng.normal(0.1, 0.3, c).astype(np.float32)
    return spec, params


@pytest.mark.parametrize("seed", range(100))
def test_scored_output_matches_brute_force(seed):
    """Engine t equals a recomputation with the ablated filters physically zeroed."""
    spec, params = _toy_net(seed % 7)
    rng = np.random.default_rng(seed)
    conv = spec.convs[int(rng.integers(0, 3))]
    x = rng.standard_normal((16, 8, 8, 2)).astype(np.float32)
    tape = ng.run(spec, params, x, None, "eval")
    st_ = LayerPruningState.fresh(conv, spec[conv].width)
    st_.clear_records()
    h, t = scoring_pass(spec, params, st_, tape, rng, bn_from_base=True)

    # brute force: zero the filters (kernel + bias + BN shift) so their block output is zero
    brute = params.copy()
    topo = spec.topology[conv]
    brute[f"{conv}.kernel"][..., h] = 0
    brute[f"{conv}.bias"][h] = 0
    brute[f"{topo.bn}.gamma"][h] = 0
    brute[f"{topo.bn}.beta"][h] = 0
    end = successor_chain(spec, conv)[-1]
    _, base = ng.forward(spec, params, x, record=[end])
    _, ablated = ng.forward(spec, brute, x, record=[end])
    expected = damage_sum(base[end], ablated[end])
    assert t == pytest.approx(expected, rel=1e-6, abs=1e-12)
    assert all(st_.records[j] == [t] for j in h)


def test_dead_filters_give_zero_damage():
    spec = ng.NetworkSpec(
        [ng.LayerSpec(0, "conv", width=4, kernel=3, padding=1, predecessors=[-1], prunable=True),
         ng.LayerSpec(1, "relu", predecessors=[0]),
         ng.LayerSpec(2, "conv", width=3, kernel=3, padding=1, predecessors=[1]),
         ng.LayerSpec(3, "relu", predecessors=[2]),
         ng.LayerSpec(4, "flatten", predecessors=[3]),
         ng.LayerSpec(5, "fc", width=2, predecessors=[4])],
        (5, 5, 1), 2)
    params = ng.init_params(spec, 0)
    params["0.kernel"][..., :2] = 0  # filters 0 and 1 are dead
    params["2.bias"][:] = 0.1
    x = np.random.default_rng(0).standard_normal((4, 5, 5, 1)).astype(np.float32)
    tape = ng.run(spec, params, x)
    s = LayerPruningState.fresh(0, 4)
    s.search_space = [0, 1]
    s.clear_records()
    _, t = scoring_pass(spec, params, s, tape, np.random.default_rng(0))
    assert t == 0.0


def test_dominant_filter_has_larger_damage():
    spec, params = _toy_net(1)
    conv = spec.convs[1]
    params[f"{conv}.kernel"] *= 0.05
    params[f"{conv}.kernel"][..., 2] *= 60  # filter 2 dominates the next layer's input
    x = np.random.default_rng(5).standard_normal((32, 8, 8, 2)).astype(np.float32)
    tape = ng.run(spec, params, x)
    s = LayerPruningState.fresh(conv, spec[conv].width)
    s.clear_records()
    rng = np.random.default_rng(6)
    with_d, without_d = [], []
    for _ in range(200):
        h, t = scoring_pass(spec, params, s, tape, rng)
        (with_d if 2 in h else without_d).append(t)
    assert np.mean(with_d) > np.mean(without_d)


def test_sample_bookkeeping():
    spec, params = _toy_net(2)
    conv = spec.convs[0]
    x = np.random.default_rng(7).standard_normal((8, 8, 8, 2)).astype(np.float32)
    tape = ng.run(spec, params, x)
    s = LayerPruningState.fresh(conv, 6)
    s.clear_records()
    phi = 25
    rng = np.random.default_rng(8)
    for _ in range(phi):
        scoring_pass(spec, params, s, tape, rng)
    assert sum(len(r) for r in s.records.values()) == phi * 3
    assert s.samples == phi


def test_scoring_does_not_touch_base_path():
    spec, params = _toy_net(3)
    x = np.random.default_rng(9).standard_normal((8, 8, 8, 2)).astype(np.float32)
    tape = ng.run(spec, params, x, None, "train", keep=True)
    before = {k: v.copy() for k, v in tape.outputs.items()}
    snapshot = params.copy()
    rng = np.random.default_rng(10)
    for conv in spec.convs:
        s = LayerPruningState.fresh(conv, spec[conv].width)
        s.clear_records()
        for _ in range(5):
            scoring_pass(spec, params, s, tape, rng)
    assert params.equal(snapshot)
    assert all(np.array_equal(before[k], tape.outputs[k]) for k in before)


# ---------------------------------------------------------------- full run


def _toy_data(n=256, seed=0):
    rng = np.random.default_rng(seed)
    protos = rng.uniform(0, 1, (3, 8, 8, 2))
    y = rng.integers(0, 3, n)
    return Dataset(protos[y] + 0.2 * rng.standard_normal((n, 8, 8, 2)), y)


def test_theta_zero_prunes_nothing():
    spec, params = _toy_net(4)
    data = _toy_data()
    cfg = AofpConfig(theta=0.0, phi=5, max_steps=60, batch_size=32, finetune_steps=0)
    res = aofp_run(spec, params, data, cfg)
    assert not res.moves and not res.reached
    assert res.spec == spec
    assert res.decisions and all(d[2] != "pruned" for d in res.decisions)


def test_run_reaches_target_and_stops():
    spec, params = _toy_net(5, (8, 8, 8))
    data = _toy_data()
    cfg = AofpConfig(theta=float("inf"), phi=3, target_flops_drop=0.3, batch_size=32, finetune_steps=0)
    res = aofp_run(spec, params, data, cfg)
    assert res.reached
    red = [1 - m.flops_effective / res.base_flops for m in res.moves]
    assert red[-1] >= 0.3 and (len(red) == 1 or red[-2] < 0.3)
    assert res.reduction == pytest.approx(red[-1])
    # monotone structure
    assert all(a.flops_effective >= b.flops_effective for a, b in zip(res.moves, res.moves[1:]))


def test_masked_filters_frozen_and_reconstruction_exact():
    spec, params = _toy_net(6, (8, 8, 8))
    data = _toy_data()
    frozen = {}

    def check(step, p, states):
        for i, s in states.items():
            dead = np.flatnonzero(s.base_mask == 0)
            for j in dead:
                key = (i, int(j))
                val = (p[f"{i}.kernel"][..., j].copy(), p[f"{i}.bias"][j].copy())
                if key in frozen:
                    assert np.array_equal(frozen[key][0], val[0]) and frozen[key][1] == val[1]
                else:
                    frozen[key] = val

    cfg = AofpConfig(theta=float("inf"), phi=4, target_flops_drop=0.95, batch_size=32, finetune_steps=0)
    res = aofp_run(spec, params, data, cfg, on_step=check)
    assert frozen
    a, _ = ng.forward(spec, res.masked_params, data.x[:100], res.base_masks)
    b, _ = ng.forward(res.spec, res.params, data.x[:100])
    assert np.max(np.abs(a - b)) <= 1e-5


def test_per_layer_mode_reports_unreachable():
    spec, params = _toy_net(7)
    data = _toy_data()
    cfg = AofpConfig(theta=0.0, phi=2, mode="per-layer", target_flops_drop=0.5, batch_size=32,
                     finetune_steps=0)
    res = aofp_run(spec, params, data, cfg)
    assert not res.reached and res.steps < cfg.max_steps


def test_rejects_narrow_layers():
    spec, params = _toy_net(8, (1, 4, 4))
    with pytest.raises(ValueError):
        aofp_run(spec, params, _toy_data(), AofpConfig())


def test_config_validation():
    with pytest.raises(ValueError):
        AofpConfig(theta=-1)
    with pytest.raises(ValueError):
        AofpConfig(phi=0)
    with pytest.raises(ValueError):
        AofpConfig(target_flops_drop=0)
