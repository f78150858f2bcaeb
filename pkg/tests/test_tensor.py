"""Tensor engine: op contracts, oracles, and autodiff."""

import numpy as np
import pytest

from psdt import tensor as T
from psdt.gradcheck import op_checks
from psdt.tensor import DimensionError, NumericsError, Tape


def t64(arr, req=True):
    return T.tensor(np.asarray(arr, dtype=np.float64), requires_grad=req)


class TestMatmul:
    def test_identity(self):
        a = t64(np.eye(2), req=False)
        b = t64([[1.0, 2.0], [3.0, 4.0]], req=False)
        assert np.array_equal(T.matmul(a, b).data, b.data)

    def test_selector_row(self):
        a = t64([[1.0, 0.0], [0.0, 0.0]], req=False)
        b = t64([[5.0, 6.0], [7.0, 8.0]], req=False)
        assert np.array_equal(T.matmul(a, b).data, [[5.0, 6.0], [0.0, 0.0]])

    def test_against_triple_loop(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        # brute-force oracle
        expect = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    expect[i, j] += a[i, k] * b[k, j]
        got = T.matmul(t64(a, req=False), t64(b, req=False)).data
        assert np.abs(got - expect).max() < 1e-6

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError) as exc:
            T.matmul(t64(np.zeros((2, 3))), t64(np.zeros((2, 3))))
        assert "(2, 3)" in str(exc.value)


class TestSoftmax:
    def test_symmetry(self):
        out = T.softmax(t64([[0.0, 0.0, 0.0]], req=False)).data
        assert np.allclose(out, 1 / 3, atol=1e-12)

    def test_stability_no_overflow(self):
        out = T.softmax(t64([[1000.0, 0.0]], req=False)).data
        assert np.isfinite(out).all()
        assert out[0, 0] == pytest.approx(1.0)
        assert out[0, 1] == pytest.approx(0.0, abs=1e-12)

    def test_against_direct_formula(self):
        x = np.array([[1.0, 2.0, 3.0]])
        expect = np.exp(x) / np.exp(x).sum()
        got = T.softmax(t64(x, req=False)).data
        assert np.abs(got - expect).max() < 1e-7

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(4, 7)) * 5
        got = T.softmax(t64(x, req=False), axis=-1).data
        assert np.allclose(got.sum(axis=-1), 1.0, atol=1e-12)

    def test_other_axis(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(3, 5))
        got = T.softmax(t64(x, req=False), axis=0).data
        assert np.allclose(got.sum(axis=0), 1.0, atol=1e-12)


class TestLayerNorm:
    def test_constant_row_collapses_to_bias(self):
        gain = t64([1.0, 1.0, 1.0], req=False)
        bias = t64([0.0, 0.0, 0.0], req=False)
        out = T.layer_norm(t64([[5.0, 5.0, 5.0]], req=False), gain, bias).data
        assert np.allclose(out, 0.0, atol=1e-9)

    def test_already_normalized(self):
        out = T.layer_norm(t64([[1.0, -1.0]], req=False)).data
        assert np.allclose(out, [[1.0, -1.0]], atol=1e-4)

    def test_against_two_pass_oracle(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(1, 9)) * 3 + 1
        gain = rng.normal(size=9)
        bias = rng.normal(size=9)
        mu = x.mean()
        var = ((x - mu) ** 2).mean()
        expect = (x - mu) / np.sqrt(var + 1e-5) * gain + bias
        got = T.layer_norm(t64(x, req=False), t64(gain, req=False),
                           t64(bias, req=False), eps=1e-5).data
        assert np.abs(got - expect).max() < 1e-10

    def test_gain_shape_checked(self):
        with pytest.raises(DimensionError):
            T.layer_norm(t64(np.zeros((2, 4))), gain=t64(np.zeros(3)))


class TestBackward:
    def test_sum_gives_ones(self):
        w = t64(np.arange(6.0).reshape(2, 3))
        with Tape() as tape:
            tape.backward(T.tsum(w))
        assert np.array_equal(tape.grad(w), np.ones((2, 3)))

    def test_sum_of_squares_gives_2w(self):
        w = t64([1.0, -2.0, 3.0])
        with Tape() as tape:
            tape.backward(T.tsum(T.mul(w, w)))
        assert np.allclose(tape.grad(w), 2 * w.data, atol=1e-12)

    def test_non_scalar_root_rejected(self):
        w = t64([1.0, 2.0])
        with Tape() as tape:
            y = T.mul(w, w)
            with pytest.raises(DimensionError):
                tape.backward(y)

    def test_off_path_leaves_get_zeros(self):
        w = t64([1.0, 2.0])
        u = t64([3.0, 4.0])
        with Tape() as tape:
            tape.watch(u)
            tape.backward(T.tsum(w))
        assert np.array_equal(tape.grad(u), np.zeros(2))

    def test_shared_input_accumulates(self):
        w = t64([1.0, 2.0])
        with Tape() as tape:
            tape.backward(T.tsum(T.add(T.mul(w, w), w)))
        assert np.allclose(tape.grad(w), 2 * w.data + 1, atol=1e-12)

    def test_grad_shape_matches_leaf(self):
        w = t64(np.ones((3, 1)))
        b = t64(np.ones(4))
        with Tape() as tape:
            tape.backward(T.tsum(T.add(w, b)))   # broadcast (3,1)+(4,)
        assert tape.grad(w).shape == (3, 1)
        assert tape.grad(b).shape == (4,)


@pytest.mark.parametrize("seed", range(10))
def test_every_op_grad_check(seed):
    errs = op_checks(seed)
    bad = {k: v for k, v in errs.items() if v >= 1e-4}
    assert not bad, f"ops over tolerance: {bad}"


def test_log_grad_check():
    rng = np.random.default_rng(0)
    x = T.tensor(rng.uniform(0.5, 3.0, size=(3, 4)), dtype=np.float64,
                 requires_grad=True)
    err = T.grad_check(lambda: T.tsum(T.mul(T.log(x), x)), {"x": x})
    assert err < 1e-4


class TestRoundTrips:
    def test_reshape_bijective(self):
        rng = np.random.default_rng(5)
        x = t64(rng.normal(size=(2, 3, 4)), req=False)
        back = T.reshape(T.reshape(x, (6, 4)), (2, 3, 4))
        assert np.array_equal(back.data, x.data)

    def test_transpose_bijective(self):
        rng = np.random.default_rng(6)
        x = t64(rng.normal(size=(2, 3, 4)), req=False)
        back = T.transpose(T.transpose(x, (2, 0, 1)), (1, 2, 0))
        assert np.array_equal(back.data, x.data)

    def test_concat_slice_round_trip(self):
        rng = np.random.default_rng(7)
        a = t64(rng.normal(size=(2, 3)), req=False)
        b = t64(rng.normal(size=(2, 5)), req=False)
        cat = T.concat([a, b], axis=1)
        assert np.array_equal(cat[:, :3].data, a.data)
        assert np.array_equal(cat[:, 3:].data, b.data)


def test_embedding_gathers_rows():
    table = t64(np.arange(12.0).reshape(4, 3), req=False)
    out = T.embedding(table, [2, 0, 2])
    assert np.array_equal(out.data, table.data[[2, 0, 2]])
    with pytest.raises(IndexError):
        T.embedding(table, [4])


def test_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(42)
        x = T.tensor(rng.normal(size=(4, 8)).astype(np.float32), requires_grad=True)
        w = T.tensor(rng.normal(size=(8, 8)).astype(np.float32), requires_grad=True)
        with Tape() as tape:
            y = T.tsum(T.gelu(T.matmul(T.softmax(x), w)))
            tape.backward(y)
            return y.item(), tape.grad(w).copy()

    y1, g1 = run()
    y2, g2 = run()
    assert y1 == y2
    assert np.array_equal(g1, g2)


def test_mixed_dtype_rejected():
    a = T.tensor(np.zeros(3, dtype=np.float32))
    b = T.tensor(np.zeros(3, dtype=np.float64))
    with pytest.raises(DimensionError):
        T.add(a, b)


def test_debug_mode_flags_non_finite():
    T.set_debug_checks(True)
    try:
        x = T.tensor(np.array([1e300]))
        with np.errstate(over="ignore"), pytest.raises(NumericsError):
            T.mul(x, x)
    finally:
        T.set_debug_checks(False)


def test_tensor_size_invariant():
    x = T.tensor(np.zeros((3, 5)))
    assert x.size == 15 and x.data.size == int(np.prod(x.shape))


def test_parameter_carries_dotted_name():
    from psdt.tensor import Parameter
    p = Parameter("blocks.0.attn.wq.weight", np.zeros((2, 2), dtype=np.float32))
    assert p.name == "blocks.0.attn.wq.weight"
    assert p.requires_grad


def test_tape_nodes_are_topologically_ordered():
    rng = np.random.default_rng(0)
    a = t64(rng.normal(size=(3, 3)))
    b = t64(rng.normal(size=(3, 3)))
    with Tape() as tape:
        c = T.matmul(a, b)
        d = T.gelu(T.add(c, a))
        tape.backward(T.tsum(T.mul(d, c)))
    for nid, node in enumerate(tape.nodes):
        assert all(iid < nid for iid in node.inputs if iid >= 0)
