import io
import math
import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from deskmoe.core import RngStreams, Tape, Tensor, gradcheck, ops, parameter, precision, stream, topk, truncated_normal
from deskmoe.core.serialize import read_tensor, tensor_bytes, write_tensor
from deskmoe.errors import ParameterError, RangeError, SchemaError, ShapeError
from oracles import softmax_ref, topk_ref, truncated_normal_std

OP_TOL = 1e-5


def _p(rng, *shape):
    return parameter(rng.normal(size=shape))


def _weighted(t, rng):
    """Scalar probe: sum of ``t`` against fixed random weights (exercises every output entry)."""
    c = rng.normal(size=t.shape)
    return ops.sum(ops.mul_const(t, c))


# ---------------------------------------------------------------- forward examples


def test_matmul_examples():
    a = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
    b = Tensor(np.array([[3.0, 4.0], [5.0, 6.0]]))
    np.testing.assert_array_equal(ops.matmul(a, b).data, [[3, 4], [5, 6]])
    np.testing.assert_array_equal(ops.matmul(Tensor(np.array([[1.0, 2.0]])), Tensor(np.array([[3.0], [4.0]]))).data, [[11]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        ops.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_softmax_examples():
    np.testing.assert_allclose(ops.softmax(Tensor(np.zeros(4))).data, [0.25] * 4)
    np.testing.assert_allclose(ops.softmax(Tensor(np.array([2.0, 1.0, 0.5, 0.0]))).data, [0.5793, 0.2131, 0.1293, 0.0784], atol=1e-4)
    big = ops.softmax(Tensor(np.array([1000.0, 0.0]))).data
    assert np.all(np.isfinite(big))
    np.testing.assert_allclose(big, [1.0, 0.0], atol=1e-12)


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=2, min_side=1, max_side=12),
                  elements=st.floats(-50, 50)))
def test_softmax_sums_to_one_and_positive(x):
    y = ops.softmax(Tensor(x), axis=-1).data
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)
    assert np.all(y > 0)


def test_softmax_matches_oracle(rng):
    x = rng.normal(size=7) * 3
    np.testing.assert_allclose(ops.softmax(Tensor(x)).data, softmax_ref(x), rtol=1e-12)


def test_topk_examples():
    assert topk(np.array([0.1, 0.9, 0.5]), 1)[0].tolist() == [1]
    assert topk(np.zeros(4), 2)[0].tolist() == [0, 1]
    idx, vals = topk(np.array([3.0, 1.0, 3.0, 2.0]), 3)
    assert idx.tolist() == [0, 2, 3]
    assert vals.tolist() == [3.0, 3.0, 2.0]


def test_topk_random_vector_matches_sort(rng):
    x = rng.normal(size=64)
    assert topk(x, 8)[0].tolist() == topk_ref(list(x), 8)


def test_topk_thousand_vectors_with_duplicates(rng):
    for _ in range(1000):
        n = int(rng.integers(1, 20))
        x = rng.integers(0, 5, size=n).astype(float)  # many ties
        k = int(rng.integers(1, n + 1))
        assert topk(x, k)[0].tolist() == topk_ref(list(x), k)


@given(st.lists(st.integers(-3, 3), min_size=1, max_size=16), st.data())
def test_topk_property(xs, data):
    k = data.draw(st.integers(1, len(xs)))
    assert topk(np.array(xs, dtype=float), k)[0].tolist() == topk_ref([float(v) for v in xs], k)


@pytest.mark.parametrize("k", [0, 5])
def test_topk_range_error(k):
    with pytest.raises(ParameterError):
        topk(np.zeros(4), k)


def test_rmsnorm_constant_vector():
    c, eps = -3.0, 1e-5
    y = ops.rmsnorm(Tensor(np.full(6, c)), Tensor(np.ones(6)), eps).data
    np.testing.assert_allclose(y, c / math.sqrt(c * c + eps), rtol=1e-12)


def test_rmsnorm_rejects_bad_eps():
    with pytest.raises(ParameterError):
        ops.rmsnorm(Tensor(np.ones(3)), None, 0.0)


def test_swiglu_is_silu_times_up(rng):
    g, u = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    np.testing.assert_allclose(ops.swiglu(Tensor(g), Tensor(u)).data, g / (1 + np.exp(-g)) * u, rtol=1e-12)


def test_silu_extreme_inputs_are_finite():
    y = ops.silu(Tensor(np.array([-1000.0, 0.0, 1000.0]))).data
    np.testing.assert_allclose(y, [0.0, 0.0, 1000.0])


def test_cross_entropy_uniform_logits_is_log_v():
    V = 37
    ce = ops.cross_entropy(Tensor(np.zeros((5, V))), np.arange(5))
    assert float(ce.data) == pytest.approx(math.log(V), rel=1e-12)


@pytest.mark.parametrize("bad", [-1, 4])
def test_cross_entropy_invalid_target(bad):
    with pytest.raises(RangeError):
        ops.cross_entropy(Tensor(np.zeros((2, 4))), np.array([0, bad]))


def test_rope_preserves_pairwise_norm_and_relative_position(rng):
    x = rng.normal(size=(1, 6, 8))
    y = ops.rope(Tensor(x), np.arange(6)).data
    np.testing.assert_allclose(np.linalg.norm(y, axis=-1), np.linalg.norm(x, axis=-1), rtol=1e-12)
    q, k = rng.normal(size=8), rng.normal(size=8)

    def dot_at(i, j):
        a = ops.rope(Tensor(np.tile(q, (1, 12, 1))), np.arange(12)).data[0, i]
        b = ops.rope(Tensor(np.tile(k, (1, 12, 1))), np.arange(12)).data[0, j]
        return a @ b

    assert dot_at(5, 3) == pytest.approx(dot_at(9, 7), rel=1e-10)
    np.testing.assert_allclose(ops.rope(Tensor(x), np.arange(6)).data[:, 0], x[:, 0])  # position 0 unchanged


def test_causal_softmax_masks_future(rng):
    y = ops.causal_softmax(Tensor(rng.normal(size=(2, 5, 5)))).data
    assert np.all(np.triu(y[0], k=1) == 0)
    np.testing.assert_allclose(y.sum(-1), 1.0)


def test_truncated_normal_statistics():
    std, cutoff = 0.02, 0.06
    v = truncated_normal((1_000_000,), std, cutoff, stream(0, "test", "tn"), dtype=np.float64)
    assert np.abs(v).max() <= cutoff
    expected = truncated_normal_std(std, cutoff)
    assert expected == pytest.approx(0.019732, abs=1e-6)
    assert abs(v.std() - expected) / expected < 0.02


@given(st.floats(0.001, 1.0), st.floats(0.1, 3.0), st.integers(0, 2**31))
def test_truncated_normal_never_exceeds_cutoff(std, ratio, seed):
    cutoff = std * ratio
    v = truncated_normal((2000,), std, cutoff, np.random.default_rng(seed), dtype=np.float64)
    assert np.abs(v).max() <= cutoff


def test_truncated_normal_rejects_bad_cutoff(rng):
    with pytest.raises(ParameterError):
        truncated_normal((3,), 0.02, 0.0, rng)


# ---------------------------------------------------------------- gradients


def _op_cases(rng):
    a, b = _p(rng, 4, 5), _p(rng, 5, 3)
    x = _p(rng, 3, 8)
    w = parameter(rng.normal(size=8) + 1.5)
    g, u = _p(rng, 3, 6), _p(rng, 3, 6)
    q = _p(rng, 2, 5, 8)
    s = _p(rng, 2, 4, 4)
    lg = _p(rng, 6, 7)
    tgt = rng.integers(0, 7, size=6)
    rows = _p(rng, 5, 3)
    idx = np.array([4, 0, 0, 2, 4, 1])
    src = _p(rng, 6, 3)
    probs = _p(rng, 4, 3)
    xs, ws = _p(rng, 7, 4), _p(rng, 3, 4, 5)
    offsets = np.array([0, 3, 3, 7])
    scal = _p(rng, 5)
    ba, bb = _p(rng, 2, 3, 4), _p(rng, 2, 4, 5)
    return {
        "matmul": (lambda: ops.sum(ops.matmul(a, b)), [a, b]),
        "matmul_batched": (lambda: _weighted(ops.matmul(ba, bb), np.random.default_rng(1)), [ba, bb]),
        "add": (lambda: _weighted(ops.add(a, a), np.random.default_rng(2)), [a]),
        "mul": (lambda: _weighted(ops.mul(g, u), np.random.default_rng(3)), [g, u]),
        "scale_mean": (lambda: ops.mean(ops.scale(x, 2.5), axis=None), [x]),
        "mean_axis": (lambda: _weighted(ops.mean(x, axis=0), np.random.default_rng(4)), [x]),
        "silu": (lambda: _weighted(ops.silu(g), np.random.default_rng(5)), [g]),
        "swiglu": (lambda: _weighted(ops.swiglu(g, u), np.random.default_rng(6)), [g, u]),
        "rmsnorm": (lambda: _weighted(ops.rmsnorm(x, w, 1e-5), np.random.default_rng(7)), [x, w]),
        "layernorm": (lambda: _weighted(ops.layernorm(x, None, 1e-5), np.random.default_rng(8)), [x]),
        "rope": (lambda: _weighted(ops.rope(q, np.arange(5)), np.random.default_rng(9)), [q]),
        "softmax": (lambda: _weighted(ops.softmax(x, axis=-1), np.random.default_rng(10)), [x]),
        "causal_softmax": (lambda: _weighted(ops.causal_softmax(s), np.random.default_rng(11)), [s]),
        "logsumexp": (lambda: _weighted(ops.logsumexp(lg), np.random.default_rng(12)), [lg]),
        "cross_entropy": (lambda: ops.cross_entropy(lg, tgt), [lg]),
        "gather_rows": (lambda: _weighted(ops.gather_rows(rows, idx), np.random.default_rng(13)), [rows]),
        "scatter_add_rows": (lambda: _weighted(ops.scatter_add_rows(src, idx, 5), np.random.default_rng(14)), [src]),
        "take_pairs": (lambda: _weighted(ops.take_pairs(probs, np.array([0, 1, 3, 3]), np.array([2, 0, 1, 1])), np.random.default_rng(15)), [probs]),
        "scale_rows": (lambda: _weighted(ops.scale_rows(rows, scal), np.random.default_rng(16)), [rows, scal]),
        "segment_matmul": (lambda: _weighted(ops.segment_matmul(xs, ws, offsets), np.random.default_rng(17)), [xs, ws]),
        "index_expert": (lambda: _weighted(ops.index_expert(ws, 1), np.random.default_rng(18)), [ws]),
        "transpose_reshape": (lambda: _weighted(ops.reshape(ops.transpose(q, (0, 2, 1)), (2, 40)), np.random.default_rng(19)), [q]),
        "cast": (lambda: _weighted(ops.cast(x, np.float64), np.random.default_rng(20)), [x]),
    }


OP_NAMES = list(_op_cases(np.random.default_rng(0)))


@pytest.mark.parametrize("name", OP_NAMES)
def test_op_gradient_matches_finite_differences(name):
    with precision(np.float64):
        f, tensors = _op_cases(np.random.default_rng(42))[name]
        errs = gradcheck(f, tensors, h=1e-4)
    assert max(errs) < OP_TOL, f"{name}: {errs}"


@given(st.integers(0, 10_000))
def test_rmsnorm_gradient_random_inputs(seed):
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        x = parameter(rng.normal(size=(2, 5)))
        w = parameter(rng.normal(size=5))
        c = rng.normal(size=(2, 5))
        errs = gradcheck(lambda: ops.sum(ops.mul_const(ops.rmsnorm(x, w, 1e-5), c)), [x, w])
    assert max(errs) < OP_TOL


def test_gradient_accumulates_over_reuse():
    x = parameter(np.array([1.0, 2.0]))
    with Tape() as tape:
        y = ops.add(ops.mul(x, x), x)  # x^2 + x
        loss = ops.sum(y)
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, [3.0, 5.0])


def test_no_recording_without_tape():
    x = parameter(np.ones(3))
    y = ops.sum(x)
    assert not y.requires_grad


def test_tapes_are_thread_confined():
    results = {}

    def work(i):
        x = parameter(np.full(3, float(i)))
        with Tape() as tape:
            loss = ops.sum(ops.mul(x, x))
        tape.backward(loss)
        results[i] = x.grad.copy()

    threads = [threading.Thread(target=work, args=(i,)) for i in range(1, 5)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for i in range(1, 5):
        np.testing.assert_allclose(results[i], 2.0 * i)


def test_precision_context():
    with precision(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


# ---------------------------------------------------------------- serialization and RNG


def test_tensor_serialization_layout():
    arr = np.arange(6, dtype=np.float32).reshape(2, 3)
    raw = tensor_bytes(arr)
    assert raw[:4] == (2).to_bytes(4, "little")
    assert raw[4:12] == (2).to_bytes(4, "little") + (3).to_bytes(4, "little")
    assert raw[12:] == arr.astype("<f4").tobytes()


@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=4, max_side=5), elements=st.floats(-1e6, 1e6, width=32)))
def test_tensor_serialization_round_trip(arr):
    buf = io.BytesIO()
    write_tensor(buf, arr)
    buf.seek(0)
    back = read_tensor(buf)
    assert back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()


def test_tensor_serialization_truncated():
    raw = tensor_bytes(np.ones((3, 3), dtype=np.float32))
    with pytest.raises(SchemaError):
        read_tensor(io.BytesIO(raw[:-2]))


def test_named_streams_are_independent_of_order():
    a = RngStreams(7)
    first = a.get("x").normal(size=3)
    b = RngStreams(7)
    b.get("y").normal(size=10)
    np.testing.assert_array_equal(b.get("x").normal(size=3), first)


def test_rng_state_round_trip():
    s = RngStreams(3)
    s.get("a", "b").normal(size=5)
    import json

    state = json.loads(json.dumps(s.state_dict()))
    r = RngStreams.from_state(state)
    np.testing.assert_array_equal(r.get("a", "b").normal(size=4), s.get("a", "b").normal(size=4))


def test_split_streams_differ():
    s = RngStreams(3)
    assert s.split("w").seed != s.split("v").seed
    assert not np.array_equal(s.split("w").get("z").normal(size=4), s.split("v").get("z").normal(size=4))
