import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from deskmoe.core import Tape, Tensor, gradcheck, ops, parameter, precision
from deskmoe.errors import ConfigError, ConsistencyError, NumericError, ParameterError
from deskmoe.moe import (
    EXPERT_CHOICE,
    ExpertParams,
    FfnParams,
    MoeLayerConfig,
    MoeParams,
    combinations,
    expert_capacity,
    ffn_forward,
    force_routing,
    moe_forward,
    route,
    route_expert_choice,
    route_token_choice,
    shared_expert_forward,
)
from oracles import expert_choice_ref, naive_moe, softmax_ref, swiglu_ffn_ref


def make_layer(rng, n_experts=8, k=2, d=12, f=6, shared=0, mode="token_choice", cf=2.0, scale=0.4):
    cfg = MoeLayerConfig(n_experts, k, f, d, routing_mode=mode, capacity_factor=cf, shared_experts=shared)
    params = MoeParams(
        router=parameter(rng.normal(size=(d, n_experts)) * scale),
        experts=ExpertParams(
            parameter(rng.normal(size=(n_experts, d, f)) * scale),
            parameter(rng.normal(size=(n_experts, d, f)) * scale),
            parameter(rng.normal(size=(n_experts, f, d)) * scale),
        ),
        shared=FfnParams(*(parameter(rng.normal(size=s) * scale) for s in [(d, f), (d, f), (f, d)])) if shared else None,
    )
    return cfg, params


def _np(p):
    return p.data.astype(np.float64)


# ---------------------------------------------------------------- config


@pytest.mark.parametrize(
    "kw",
    [
        dict(n_experts=4, n_active=0),
        dict(n_experts=4, n_active=5),
        dict(n_experts=4, n_active=1, ffn_dim=0),
        dict(n_experts=4, n_active=1, shared_experts=2),
        dict(n_experts=4, n_active=1, routing_mode="hash"),
        dict(n_experts=4, n_active=1, routing_mode=EXPERT_CHOICE, capacity_factor=0),
        dict(n_experts=4, n_active=1, routing_mode=EXPERT_CHOICE, shared_experts=1),
    ],
)
def test_layer_config_invariants(kw):
    base = dict(ffn_dim=4, model_dim=4)
    base.update(kw)
    with pytest.raises(ConfigError):
        MoeLayerConfig(**base)


# ---------------------------------------------------------------- token choice


def test_token_choice_example():
    # identity input against a router whose single row holds the logits
    x = Tensor(np.array([[1.0]]))
    w = Tensor(np.array([[2.0, 1.0, 0.5, 0.0]]))
    d = route_token_choice(x, w, 2)
    assert d.expert_ids.tolist() == [[0, 1]]
    np.testing.assert_allclose(d.selected_probs, [[0.5793, 0.2131]], atol=1e-4)


def test_token_choice_equal_logits_tie_rule():
    d = route_token_choice(Tensor(np.zeros((1, 3))), Tensor(np.zeros((3, 5))), 2)
    assert d.expert_ids.tolist() == [[0, 1]]
    np.testing.assert_allclose(d.selected_probs, [[0.2, 0.2]])


def test_token_choice_rejects_large_k():
    with pytest.raises(ParameterError):
        route_token_choice(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 4))), 5)


def test_non_finite_logits_raise():
    x = Tensor(np.array([[np.inf, 0.0]]))
    with pytest.raises(NumericError):
        route_token_choice(x, Tensor(np.ones((2, 3))), 1)


@given(st.integers(0, 2**31), st.integers(1, 40), st.integers(1, 12), st.data())
def test_dropless_invariant_property(seed, T, n_experts, data):
    k = data.draw(st.integers(1, n_experts))
    rng = np.random.default_rng(seed)
    d = route_token_choice(Tensor(rng.normal(size=(T, 5))), Tensor(rng.normal(size=(5, n_experts))), k)
    ids = d.expert_ids
    assert ids.shape == (T, k)
    assert all(len(set(row)) == k for row in ids.tolist())
    assert d.counts_per_expert.sum() == T * k
    sel = d.selected_probs
    assert np.all((sel > 0) & (sel <= 1))
    sums = sel.sum(axis=1)
    if k == n_experts:
        np.testing.assert_allclose(sums, 1.0, rtol=1e-5)
    else:
        assert np.all(sums <= 1 + 1e-6)


# ---------------------------------------------------------------- expert choice


def test_expert_choice_full_capacity():
    rng = np.random.default_rng(0)
    d = route_expert_choice(Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=(3, 2))), 2.0)
    assert d.capacity == 4
    for e in range(2):
        assert sorted(d.token_idx[d.expert_idx == e].tolist()) == [0, 1, 2, 3]


def test_expert_choice_capacity_arithmetic():
    rng = np.random.default_rng(1)
    d = route_expert_choice(Tensor(rng.normal(size=(8, 3))), Tensor(rng.normal(size=(3, 4))), 1.0)
    assert d.capacity == 2
    assert d.n_assignments == 8
    assert d.counts_per_expert.tolist() == [2, 2, 2, 2]


def test_expert_choice_matches_column_sort_oracle(rng):
    x, w = rng.normal(size=(6, 4)), rng.normal(size=(4, 3))
    d = route_expert_choice(Tensor(x), Tensor(w), 1.0)
    ref = expert_choice_ref(np.stack([softmax_ref(r) for r in x @ w]), 2)
    for e in range(3):
        assert sorted(d.token_idx[d.expert_idx == e].tolist()) == ref[e]


def test_expert_choice_ties_by_lowest_token():
    d = route_expert_choice(Tensor(np.zeros((6, 2))), Tensor(np.zeros((2, 3))), 1.0)
    for e in range(3):
        assert d.token_idx[d.expert_idx == e].tolist() == [0, 1]


def test_expert_capacity_below_one_is_config_error():
    with pytest.raises(ConfigError):
        expert_capacity(3, 8, 1.0)


def test_expert_choice_dropped_tokens_keep_zero_output(rng):
    cfg, params = make_layer(rng, n_experts=4, k=1, mode=EXPERT_CHOICE, cf=0.5)
    x = Tensor(rng.normal(size=(16, 12)))
    d = route(x, params, cfg)
    out = moe_forward(x, cfg, params, d).data
    unused = np.setdiff1d(np.arange(16), d.token_idx)
    assert unused.size > 0
    np.testing.assert_array_equal(out[unused], 0.0)


# ---------------------------------------------------------------- forward equivalences


def test_grouped_dispatch_matches_naive_loop(rng):
    cfg, params = make_layer(rng, n_experts=8, k=2)
    x = rng.normal(size=(16, 12))
    out = moe_forward(Tensor(x), cfg, params, route(Tensor(x), params, cfg)).data
    ref = naive_moe(x, _np(params.router), _np(params.experts.w_gate), _np(params.experts.w_up), _np(params.experts.w_down), 2)
    assert np.abs(out - ref).max() < 1e-6


def test_grouped_dispatch_with_shared_expert_matches_naive_loop(rng):
    cfg, params = make_layer(rng, n_experts=6, k=3, shared=1)
    x = rng.normal(size=(10, 12))
    out = moe_forward(Tensor(x), cfg, params, route(Tensor(x), params, cfg)).data
    sh = tuple(_np(p) for p in (params.shared.w_gate, params.shared.w_up, params.shared.w_down))
    ref = naive_moe(x, _np(params.router), _np(params.experts.w_gate), _np(params.experts.w_up), _np(params.experts.w_down), 3, sh)
    assert np.abs(out - ref).max() < 1e-6


def test_single_expert_equals_dense_ffn(rng):
    cfg, params = make_layer(rng, n_experts=1, k=1)
    x = rng.normal(size=(9, 12))
    out = moe_forward(Tensor(x), cfg, params, route(Tensor(x), params, cfg)).data
    dense = swiglu_ffn_ref(x, _np(params.experts.w_gate)[0], _np(params.experts.w_up)[0], _np(params.experts.w_down)[0])
    assert np.abs(out - dense).max() < 1e-6


def test_identical_experts_with_all_active_equal_one_expert(rng):
    cfg, params = make_layer(rng, n_experts=4, k=4)
    for w in (params.experts.w_gate, params.experts.w_up, params.experts.w_down):
        w.data[:] = w.data[0]
    x = rng.normal(size=(7, 12))
    out = moe_forward(Tensor(x), cfg, params, route(Tensor(x), params, cfg)).data
    ref = swiglu_ffn_ref(x, _np(params.experts.w_gate)[0], _np(params.experts.w_up)[0], _np(params.experts.w_down)[0])
    assert np.abs(out - ref).max() < 1e-5


def test_shared_expert_zero_input_and_dense_equivalence(rng):
    cfg, params = make_layer(rng, n_experts=4, k=1, shared=1)
    np.testing.assert_array_equal(shared_expert_forward(Tensor(np.zeros((3, 12))), params, cfg).data, 0.0)
    x = Tensor(rng.normal(size=(5, 12)))
    np.testing.assert_allclose(shared_expert_forward(x, params, cfg).data, ffn_forward(x, params.shared).data)


def test_shared_expert_forward_requires_shared(rng):
    cfg, params = make_layer(rng)
    with pytest.raises(ConfigError):
        shared_expert_forward(Tensor(np.zeros((1, 12))), params, cfg)


def test_decision_config_mismatch(rng):
    cfg, params = make_layer(rng, n_experts=8)
    x = Tensor(rng.normal(size=(5, 12)))
    d = route(x, params, cfg)
    with pytest.raises(ConsistencyError):
        moe_forward(Tensor(rng.normal(size=(6, 12))), cfg, params, d)


def test_force_routing_with_constant_weights(rng):
    cfg, params = make_layer(rng, n_experts=4, k=2)
    x = rng.normal(size=(3, 12))
    d = force_routing(route(Tensor(x), params, cfg), np.array([[3], [3], [3]]), np.ones((3, 1)))
    out = moe_forward(Tensor(x), cfg, params, d).data
    ref = swiglu_ffn_ref(x, _np(params.experts.w_gate)[3], _np(params.experts.w_up)[3], _np(params.experts.w_down)[3])
    np.testing.assert_allclose(out, ref, atol=1e-6)


# ---------------------------------------------------------------- gradients


@pytest.mark.parametrize("mode,shared", [("token_choice", 0), ("token_choice", 1), ("expert_choice", 0)])
def test_layer_gradient_matches_finite_differences(mode, shared):
    rng = np.random.default_rng(5)
    with precision(np.float64):
        cfg, params = make_layer(rng, n_experts=4, k=2, d=6, f=4, shared=shared, mode=mode, cf=1.0)
        x = parameter(rng.normal(size=(8, 6)))
        c = rng.normal(size=(8, 6))
        # routing indices are frozen at the base point, mirroring the constant-index backward rule
        frozen = route(x, params, cfg)

        def f():
            d = route(x, params, cfg)
            if not np.array_equal(d.expert_idx, frozen.expert_idx) or not np.array_equal(d.token_idx, frozen.token_idx):
                raise AssertionError("perturbation changed the routing")
            return ops.sum(ops.mul_const(moe_forward(x, cfg, params, d), c))

        tensors = [x, params.router, params.experts.w_gate, params.experts.w_up, params.experts.w_down]
        if shared:
            tensors += [params.shared.w_gate, params.shared.w_up, params.shared.w_down]
        errs = gradcheck(f, tensors, h=1e-6)
    assert max(errs) < 1e-4, errs


def test_unselected_experts_get_zero_gradient(rng):
    cfg, params = make_layer(rng, n_experts=4, k=1)
    x = Tensor(rng.normal(size=(3, 12)))
    d = force_routing(route(x, params, cfg), np.zeros((3, 1), dtype=int))
    with Tape() as tape:
        loss = ops.sum(moe_forward(x, cfg, params, d))
    tape.backward(loss)
    assert np.all(params.experts.w_gate.grad[1:] == 0)
    assert np.any(params.experts.w_gate.grad[0] != 0)


# ---------------------------------------------------------------- combinations


@pytest.mark.parametrize(
    "n,k,expected",
    [(8, 2, 28), (16, 4, 1_820), (32, 4, 35_960), (64, 8, 4_426_165_368), (31, 3, 4_495), (5, 0, 1)],
)
def test_combinations(n, k, expected):
    assert combinations(n, k) == expected


def test_combinations_out_of_range():
    with pytest.raises(ParameterError):
        combinations(4, 5)
