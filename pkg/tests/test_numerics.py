import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from grafiti.numerics import (
    AdamState,
    AffineParams,
    DegenerateAttentionError,
    DivergenceError,
    MabParams,
    MhaParams,
    Segments,
    ShapeError,
    Tape,
    Tensor,
    activation,
    adam_step,
    affine,
    graph_mha,
    mab,
    masked_softmax,
    mha,
)
from grafiti.numerics import tensor as T

from conftest import assert_gradients_match


def _affine(rng, i, o, scale=1.0):
    return AffineParams(Tensor(rng.normal(size=(i, o)) * scale), Tensor(rng.normal(size=o) * scale))


def _mha_params(rng, dq, dkv, d, heads):
    return MhaParams(_affine(rng, dq, d), _affine(rng, dkv, d), _affine(rng, dkv, d), _affine(rng, d, d), heads)


def _mha_from_flat(flat, dq, dkv, d, heads):
    """Rebuild MhaParams from 8 tensors (w, b for query, key, value, out)."""
    return MhaParams(
        AffineParams(flat[0], flat[1]),
        AffineParams(flat[2], flat[3]),
        AffineParams(flat[4], flat[5]),
        AffineParams(flat[6], flat[7]),
        heads,
    )


def _mha_arrays(rng, dq, dkv, d):
    shapes = [(dq, d), (d,), (dkv, d), (d,), (dkv, d), (d,), (d, d), (d,)]
    return [rng.normal(size=s) * 0.5 for s in shapes]


class TestTape:
    def test_fresh_tape_has_zero_gradient(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            pass
        assert len(tape) == 0
        [g] = tape.gradient(Tensor(0.0), [x])
        np.testing.assert_array_equal(g, [0.0, 0.0])

    def test_no_recording_outside_tape(self):
        x = Tensor([1.0], requires_grad=True)
        y = T.mul(x, x)
        assert not y.requires_grad

    def test_gradients_for_every_leaf(self):
        with Tape() as tape:
            a = Tensor(3.0, requires_grad=True)
            b = Tensor(4.0, requires_grad=True)
            c = T.add(T.mul(a, b), T.sin(a))
            ga, gb = tape.gradient(c, [a, b])
        assert ga == pytest.approx(4.0 + math.cos(3.0))
        assert gb == pytest.approx(3.0)

    def test_shared_subexpression_accumulates(self):
        with Tape() as tape:
            x = Tensor(3.0, requires_grad=True)
            y = T.mul(x, x)
            z = T.mul(y, y)
            [g] = tape.gradient(z, [x])
        assert g == pytest.approx(4 * 27.0)

    def test_tensors_are_read_only(self):
        x = Tensor([1.0, 2.0])
        with pytest.raises(ValueError):
            x.data[0] = 5.0


class TestAffine:
    def test_identity(self):
        p = AffineParams(Tensor(np.eye(2)), Tensor(np.zeros(2)))
        np.testing.assert_array_equal(affine(p, Tensor([[3.0, 4.0]])).data, [[3.0, 4.0]])

    def test_hand_arithmetic(self):
        p = AffineParams(Tensor([[1.0], [1.0]]), Tensor([1.0]))
        np.testing.assert_array_equal(affine(p, Tensor([[2.0, 3.0]])).data, [[6.0]])

    def test_shape_mismatch_names_both_shapes(self):
        p = AffineParams(Tensor(np.ones((3, 2))), Tensor(np.zeros(2)))
        with pytest.raises(ShapeError, match=r"\(1, 2\).*\(3, 2\)"):
            affine(p, Tensor(np.ones((1, 2))))

    def test_inconsistent_params(self):
        with pytest.raises(ShapeError):
            AffineParams(Tensor(np.ones((3, 2))), Tensor(np.zeros(3)))

    @pytest.mark.parametrize("seed", range(20))
    def test_weight_gradient_of_sum(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(4, 3))
        w, b = rng.normal(size=(3, 2)), rng.normal(size=2)

        def total(W):
            return float(affine(AffineParams(Tensor(W), Tensor(b)), Tensor(x)).data.sum())

        with Tape() as tape:
            W = Tensor(w, requires_grad=True)
            out = T.sum(affine(AffineParams(W, Tensor(b)), Tensor(x)))
            [g] = tape.gradient(out, [W])
        numeric = T.numeric_gradient(total, w, 1e-5)
        assert T.relative_error(g, numeric) < 1e-5


class TestActivation:
    def test_relu_values(self):
        np.testing.assert_array_equal(activation(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_relu_derivative(self):
        with Tape() as tape:
            x = Tensor([2.0, -1.0], requires_grad=True)
            [g] = tape.gradient(activation(x), [x])
        np.testing.assert_array_equal(g, [1.0, 0.0])

    @pytest.mark.parametrize("seed", range(20))
    def test_finite_differences_away_from_kink(self, seed):
        x = np.random.default_rng(seed).normal(size=(3, 4))
        x = np.where(np.abs(x) < 0.05, 0.5, x)
        assert_gradients_match(activation, [x])


class TestMaskedSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(masked_softmax(Tensor([[0.0, 0.0]]), [[True, True]]).data, [[0.5, 0.5]])

    def test_single_unmasked_entry(self):
        out = masked_softmax(Tensor([[5.0, 1e9]]), [[True, False]]).data
        np.testing.assert_array_equal(out, [[1.0, 0.0]])

    def test_closed_form(self):
        out = masked_softmax(Tensor([[math.log(2.0), 0.0]]), [[True, True]]).data
        np.testing.assert_allclose(out, [[2 / 3, 1 / 3]], rtol=1e-15)

    def test_all_masked_row_is_degenerate(self):
        with pytest.raises(DegenerateAttentionError):
            masked_softmax(Tensor([[1.0, 2.0], [0.0, 0.0]]), [[True, False], [False, False]])

    @settings(max_examples=60, deadline=None)
    @given(
        hnp.arrays(np.float64, (4, 5), elements=st.floats(-50, 50)),
        hnp.arrays(bool, (4, 5)),
    )
    def test_rows_are_probability_vectors(self, scores, mask):
        mask[:, 0] = True
        p = masked_softmax(Tensor(scores), mask).data
        assert np.all(p[~mask] == 0.0)
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=1e-12)

    @pytest.mark.parametrize("seed", range(20))
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        mask = rng.random((3, 5)) < 0.6
        mask[:, 2] = True
        assert_gradients_match(lambda s: masked_softmax(s, mask), [rng.normal(size=(3, 5))])

    @pytest.mark.parametrize("seed", range(20))
    def test_segment_softmax_gradient(self, seed):
        rng = np.random.default_rng(seed)
        seg = Segments(rng.integers(0, 4, size=9), 5)
        assert_gradients_match(lambda s: T.segment_softmax(s, seg), [rng.normal(size=(9, 2))])


class TestPrimitiveGradients:
    """Every differentiable primitive against central differences."""

    CASES = {
        "add_broadcast": (lambda a, b: T.add(a, b), [(3, 4), (4,)]),
        "sub": (lambda a, b: T.sub(a, b), [(3, 4), (3, 4)]),
        "mul_broadcast": (lambda a, b: T.mul(a, b), [(3, 4), (3, 1)]),
        "square": (lambda a: T.square(a), [(2, 5)]),
        "sin": (lambda a: T.sin(a), [(2, 5)]),
        "exp": (lambda a: T.exp(a), [(2, 5)]),
        "matmul": (lambda a, b: T.matmul(a, b), [(3, 4), (4, 2)]),
        "batched_matmul": (lambda a, b: T.matmul(a, b), [(2, 3, 4), (2, 4, 5)]),
        "reshape": (lambda a: T.reshape(a, (4, 3)), [(2, 6)]),
        "transpose": (lambda a: T.transpose(a, (2, 0, 1)), [(2, 3, 4)]),
        "concat": (lambda a, b: T.concat([a, b], axis=1), [(3, 2), (3, 4)]),
        "sum_axis": (lambda a: T.sum(a, axis=1), [(3, 4)]),
        "mean": (lambda a: T.mean(a), [(3, 4)]),
        "gather": (lambda a: T.gather(a, np.array([2, 0, 2, 1])), [(3, 4)]),
        "segment_sum": (lambda a: T.segment_sum(a, Segments(np.array([1, 1, 0, 3]), 4)), [(4, 3)]),
    }

    @pytest.mark.parametrize("name", sorted(CASES))
    @pytest.mark.parametrize("seed", range(20))
    def test_matches_finite_differences(self, name, seed):
        fn, shapes = self.CASES[name]
        rng = np.random.default_rng(seed)
        assert_gradients_match(fn, [rng.normal(size=s) for s in shapes])


class TestMha:
    def test_single_key_reduces_to_value_path(self, rng):
        p = _mha_params(rng, 4, 6, 4, 2)
        q = Tensor(rng.normal(size=(3, 4)))
        kv = Tensor(rng.normal(size=(1, 6)))
        out = mha(p, q, Tensor(rng.normal(size=(1, 6))), kv, np.ones((3, 1), bool)).data
        expected = affine(p.out, affine(p.value, kv)).data
        np.testing.assert_allclose(out, np.repeat(expected, 3, axis=0), rtol=1e-12)

    def test_joint_permutation_invariance(self, rng):
        p = _mha_params(rng, 4, 6, 4, 2)
        q = Tensor(rng.normal(size=(3, 4)))
        k, v = rng.normal(size=(5, 6)), rng.normal(size=(5, 6))
        mask = rng.random((3, 5)) < 0.7
        mask[:, 0] = True
        perm = rng.permutation(5)
        a = mha(p, q, Tensor(k), Tensor(v), mask).data
        b = mha(p, q, Tensor(k[perm]), Tensor(v[perm]), mask[:, perm]).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_heads_must_divide_model_dim(self, rng):
        with pytest.raises(ShapeError):
            _mha_params(rng, 4, 4, 6, 4)

    @pytest.mark.parametrize("seed", range(20))
    def test_gradients_all_projections(self, seed):
        rng = np.random.default_rng(seed)
        dq, dkv, d, h = 3, 5, 4, 2
        mask = rng.random((2, 4)) < 0.6
        mask[:, 1] = True

        def fn(q, k, v, *flat):
            return mha(_mha_from_flat(flat, dq, dkv, d, h), q, k, v, mask)

        arrays = [rng.normal(size=(2, dq)), rng.normal(size=(4, dkv)), rng.normal(size=(4, dkv))]
        assert_gradients_match(fn, arrays + _mha_arrays(rng, dq, dkv, d))

    @pytest.mark.parametrize("seed", range(10))
    def test_graph_attention_matches_dense_loop(self, seed):
        """Segment attention equals a per-query dense attention over its own keys."""
        rng = np.random.default_rng(seed)
        p = _mha_params(rng, 4, 8, 4, 2)
        n_q, m = 5, 12
        owners = rng.integers(0, n_q - 1, size=m)  # last query owns nothing
        q, k, v = rng.normal(size=(n_q, 4)), rng.normal(size=(m, 8)), rng.normal(size=(m, 8))
        out = graph_mha(p, Tensor(q), Tensor(k), Tensor(v), Segments(owners, n_q)).data
        for i in range(n_q - 1):
            rows = owners == i
            if not rows.any():
                continue
            ref = mha(p, Tensor(q[i : i + 1]), Tensor(k[rows]), Tensor(v[rows]), np.ones((1, rows.sum()), bool))
            np.testing.assert_allclose(out[i], ref.data[0], atol=1e-12)
        # no keys: zero context, output projection bias only
        np.testing.assert_allclose(out[-1], p.out.bias.data, atol=1e-12)


class TestMab:
    def test_zero_weights_reduce_to_double_relu(self, rng):
        d = 4
        z = lambda i, o: AffineParams(Tensor(np.zeros((i, o))), Tensor(np.zeros(o)))
        p = MabParams(MhaParams(z(d, d), z(6, d), z(6, d), z(d, d), 2), z(d, d))
        q0 = rng.normal(size=(3, d))
        out = mab(p, Tensor(q0), Tensor(rng.normal(size=(2, 6))), Tensor(rng.normal(size=(2, 6))), np.ones((3, 2), bool))
        np.testing.assert_array_equal(out.data, np.maximum(np.maximum(q0, 0), 0))

    def test_output_shape_equals_query_shape(self, rng):
        p = MabParams(_mha_params(rng, 4, 6, 4, 1), _affine(rng, 4, 4))
        out = mab(p, Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(5, 6))), Tensor(rng.normal(size=(5, 6))), np.ones((3, 5), bool))
        assert out.shape == (3, 4)

    def test_residual_requires_matching_width(self, rng):
        p = MabParams(_mha_params(rng, 3, 6, 4, 1), _affine(rng, 4, 4))
        with pytest.raises(ShapeError):
            mab(p, Tensor(rng.normal(size=(2, 3))), Tensor(rng.normal(size=(5, 6))), Tensor(rng.normal(size=(5, 6))), np.ones((2, 5), bool))

    @pytest.mark.parametrize("seed", range(20))
    @pytest.mark.parametrize("sparse", [False, True])
    def test_gradient(self, seed, sparse):
        rng = np.random.default_rng(seed)
        d, dkv, h = 4, 6, 2
        owners = np.array([0, 0, 1, 2, 2, 2])
        mask = Segments(owners, 3) if sparse else (owners[None, :] == np.arange(3)[:, None])

        def fn(q, k, *flat):
            p = MabParams(_mha_from_flat(flat[:8], d, dkv, d, h), AffineParams(flat[8], flat[9]))
            return mab(p, q, k, k, mask)

        arrays = [rng.normal(size=(3, d)), rng.normal(size=(6, dkv))]
        arrays += _mha_arrays(rng, d, dkv, d) + [rng.normal(size=(d, d)) * 0.5, rng.normal(size=d) * 0.5]
        assert_gradients_match(fn, arrays, rel=1e-4)


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        params = {"w": np.array([1.0, -2.0])}
        state, new = adam_step(AdamState(), params, {"w": np.zeros(2)}, 1e-3)
        np.testing.assert_array_equal(new["w"], params["w"])
        assert state.step == 1

    def test_first_step_is_signed_learning_rate(self):
        g = np.array([0.3, -5.0, 1e-2])
        _, new = adam_step(AdamState(), {"w": np.zeros(3)}, {"w": g}, 1e-3)
        # m_hat = g, v_hat = g^2  =>  step = -lr * g / (|g| + eps)
        expected = -1e-3 * g / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(new["w"], expected, rtol=1e-12)
        np.testing.assert_allclose(new["w"], -1e-3 * np.sign(g), rtol=1e-5)

    def test_descends_on_square(self):
        w = {"w": np.array([1.0])}
        state = AdamState()
        f = [1.0]
        for _ in range(2):
            state, w = adam_step(state, w, {"w": 2 * w["w"]}, 0.1)
            f.append(float(w["w"][0] ** 2))
        assert f[0] > f[1] > f[2]

    def test_nan_gradient_aborts(self):
        with pytest.raises(DivergenceError, match="w"):
            adam_step(AdamState(), {"w": np.zeros(1)}, {"w": np.array([np.nan])}, 1e-3)

    def test_inputs_not_modified(self):
        params = {"w": np.array([1.0])}
        state = AdamState()
        adam_step(state, params, {"w": np.array([1.0])}, 0.1)
        assert params["w"][0] == 1.0 and state.step == 0


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, (3, 4), elements=st.floats(-20, 20)), st.integers(0, 2**16))
def test_forward_stays_finite(x, seed):
    rng = np.random.default_rng(seed)
    p = MabParams(_mha_params(rng, 4, 4, 4, 2), _affine(rng, 4, 4))
    out = mab(p, Tensor(x), Tensor(x), Tensor(x), np.ones((3, 3), bool))
    assert np.isfinite(out.data).all()
