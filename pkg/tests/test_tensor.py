import math

import numpy as np
import pytest

from primformer.errors import EmptyGroup, NonFiniteInput
from primformer.tensor import (
    GroupSpec,
    Tape,
    add,
    concat,
    constant,
    cross_entropy_with_logits,
    gather_rows,
    gelu,
    grad_check,
    group_broadcast,
    group_max_pool,
    layer_norm,
    mask_rows,
    masked_row_softmax,
    matmul,
    mean,
    row_softmax,
    scale,
    slice_axis,
    transpose,
)

RNG = np.random.default_rng(2024)


# --- nested-loop forward references ------------------------------------------


def ref_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def ref_row_softmax(x):
    out = np.zeros_like(x)
    for i in range(x.shape[0]):
        mx = max(x[i])
        e = [math.exp(v - mx) for v in x[i]]
        s = sum(e)
        out[i] = [v / s for v in e]
    return out


def ref_layer_norm(x, gain, bias, eps=1e-5):
    out = np.zeros_like(x)
    for i in range(x.shape[0]):
        mu = sum(x[i]) / len(x[i])
        var = sum((v - mu) ** 2 for v in x[i]) / len(x[i])
        for j in range(x.shape[1]):
            out[i, j] = (x[i, j] - mu) / math.sqrt(var + eps) * gain[j] + bias[j]
    return out


def ref_gelu(x):
    out = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        out[idx] = x[idx] * 0.5 * (1.0 + math.erf(x[idx] / math.sqrt(2)))
    return out


def ref_group_max(x, ids, num_groups):
    out = np.full((num_groups, x.shape[1]), -np.inf)
    for t in range(x.shape[0]):
        for c in range(x.shape[1]):
            out[ids[t], c] = max(out[ids[t], c], x[t, c])
    return out


def ref_cross_entropy(logits, labels):
    total = 0.0
    for i in range(len(labels)):
        mx = max(logits[i])
        lse = mx + math.log(sum(math.exp(v - mx) for v in logits[i]))
        total += lse - logits[i, labels[i]]
    return total / len(labels)


class TestForwardAgainstLoops:
    def test_matmul(self):
        for _ in range(10):
            a = RNG.normal(size=(RNG.integers(1, 8), RNG.integers(1, 8)))
            b = RNG.normal(size=(a.shape[1], RNG.integers(1, 8)))
            got = matmul(constant(a), constant(b)).data
            np.testing.assert_allclose(got, ref_matmul(a, b), atol=1e-12)

    def test_row_softmax(self):
        for _ in range(10):
            x = RNG.normal(size=(RNG.integers(1, 8), RNG.integers(1, 8)))
            got = row_softmax(constant(x)).data
            np.testing.assert_allclose(got, ref_row_softmax(x), atol=1e-12)

    def test_layer_norm(self):
        for _ in range(10):
            n = int(RNG.integers(2, 8))
            x = RNG.normal(size=(RNG.integers(1, 8), n))
            gain = RNG.normal(size=n)
            bias = RNG.normal(size=n)
            got = layer_norm(constant(x), constant(gain), constant(bias)).data
            np.testing.assert_allclose(got, ref_layer_norm(x, gain, bias), atol=1e-12)

    def test_gelu(self):
        x = RNG.normal(size=(5, 7))
        np.testing.assert_allclose(gelu(constant(x)).data, ref_gelu(x), atol=1e-12)

    def test_group_max_pool(self):
        for _ in range(10):
            t, c, g = int(RNG.integers(3, 9)), int(RNG.integers(1, 6)), 3
            ids = RNG.integers(0, g, size=t)
            ids[:g] = np.arange(g)  # every group nonempty
            x = RNG.normal(size=(t, c))
            got = group_max_pool(constant(x), GroupSpec(ids, g)).data
            np.testing.assert_allclose(got, ref_group_max(x, ids, g), atol=1e-12)

    def test_cross_entropy(self):
        for _ in range(10):
            n, k = int(RNG.integers(1, 8)), int(RNG.integers(2, 6))
            logits = RNG.normal(size=(n, k))
            labels = RNG.integers(0, k, size=n)
            got = cross_entropy_with_logits(constant(logits), labels).item()
            assert abs(got - ref_cross_entropy(logits, labels)) < 1e-12

    def test_concat_slice_transpose_scale_add_mean(self):
        a = RNG.normal(size=(3, 4))
        b = RNG.normal(size=(2, 4))
        cat = concat([constant(a), constant(b)], axis=0)
        np.testing.assert_array_equal(cat.data, np.vstack([a, b]))
        sl = slice_axis(cat, 0, 3, 5)
        np.testing.assert_array_equal(sl.data, b)
        np.testing.assert_array_equal(transpose(constant(a)).data, a.T)
        np.testing.assert_array_equal(scale(constant(a), -2.0).data, -2.0 * a)
        np.testing.assert_array_equal(add(constant(a), constant(a)).data, 2 * a)
        bias = RNG.normal(size=4)
        np.testing.assert_array_equal(add(constant(a), constant(bias)).data, a + bias)
        assert abs(mean(constant(a)).item() - a.mean()) < 1e-15

    def test_gather_and_broadcast(self):
        x = RNG.normal(size=(4, 3))
        idx = np.array([2, 0, 2, 3, 1])
        np.testing.assert_array_equal(gather_rows(constant(x), idx).data, x[idx])
        g = GroupSpec(np.array([0, 1, 1, 0]), 2)
        y = RNG.normal(size=(2, 3))
        np.testing.assert_array_equal(
            group_broadcast(constant(y), g).data, y[[0, 1, 1, 0]]
        )


class TestSoftmaxExamples:
    def test_equal_row_is_uniform(self):
        for n in (1, 2, 5, 9):
            y = row_softmax(constant(np.full((1, n), 3.7))).data
            np.testing.assert_allclose(y, np.full((1, n), 1.0 / n), atol=1e-12)

    def test_zero_ln2_row(self):
        y = row_softmax(constant(np.array([[0.0, math.log(2.0)]]))).data
        np.testing.assert_allclose(y, [[1 / 3, 2 / 3]], atol=1e-12)

    def test_rows_sum_to_one(self):
        x = RNG.normal(scale=30, size=(6, 6))
        y = row_softmax(constant(x)).data
        np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(y >= 0)

    def test_nonfinite_input_rejected(self):
        x = np.zeros((2, 2))
        x[0, 0] = np.inf
        with pytest.raises(NonFiniteInput):
            row_softmax(Tensor_like(x))

    def test_backward_vs_finite_differences(self):
        x0 = RNG.normal(size=(4, 4))
        w = RNG.normal(size=(4, 1))

        def f(ts):
            return mean(matmul(row_softmax(ts["x"]), ts["w"]))

        err = grad_check(f, {"x": x0, "w": w})
        assert err < 1e-6


def Tensor_like(x):
    from primformer.tensor import Tensor

    return Tensor(x)


class TestMaskedSoftmax:
    def test_masked_columns_exact_zero(self):
        x = RNG.normal(size=(3, 5))
        mask = np.array([True, False, True, True, False])
        y = masked_row_softmax(constant(x), mask).data
        assert np.all(y[:, ~mask] == 0.0)
        np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-12)

    def test_matches_plain_softmax_when_unmasked(self):
        x = RNG.normal(size=(4, 4))
        np.testing.assert_array_equal(
            masked_row_softmax(constant(x), np.ones(4, dtype=bool)).data,
            row_softmax(constant(x)).data,
        )

    def test_all_masked_raises(self):
        with pytest.raises(EmptyGroup):
            masked_row_softmax(constant(np.zeros((2, 3))), np.zeros(3, dtype=bool))

    def test_masked_values_do_not_leak(self):
        x = RNG.normal(size=(3, 4))
        mask = np.array([True, True, False, True])
        y1 = masked_row_softmax(constant(x), mask).data
        x2 = x.copy()
        x2[:, 2] = 1e6
        y2 = masked_row_softmax(constant(x2), mask).data
        np.testing.assert_array_equal(y1, y2)


class TestGroupMaxPool:
    def test_identity_when_each_token_own_group(self):
        x = RNG.normal(size=(5, 3))
        g = GroupSpec(np.arange(5), 5)
        np.testing.assert_array_equal(group_max_pool(constant(x), g).data, x)

    def test_gradient_routes_to_argmax(self):
        tape = Tape()
        x = tape.leaf(np.array([[1.0], [5.0], [3.0]]), requires_grad=True)
        out = group_max_pool(x, GroupSpec(np.zeros(3, dtype=int), 1))
        assert out.data[0, 0] == 5.0
        tape.backward(mean(out))
        np.testing.assert_array_equal(tape.grad(x), [[0.0], [1.0], [0.0]])

    def test_tie_gradient_to_lowest_index(self):
        tape = Tape()
        x = tape.leaf(np.array([[2.0], [7.0], [7.0]]), requires_grad=True)
        out = group_max_pool(x, GroupSpec(np.zeros(3, dtype=int), 1))
        tape.backward(mean(out))
        np.testing.assert_array_equal(tape.grad(x), [[0.0], [1.0], [0.0]])

    def test_permutation_invariance_within_group(self):
        x = RNG.normal(size=(6, 4))
        ids = np.array([0, 0, 1, 1, 1, 0])
        base = group_max_pool(constant(x), GroupSpec(ids, 2)).data
        perm = np.array([5, 1, 0, 4, 2, 3])  # permutes within each group
        got = group_max_pool(constant(x[perm]), GroupSpec(ids[perm], 2)).data
        np.testing.assert_array_equal(base, got)

    def test_empty_group_raises(self):
        with pytest.raises(EmptyGroup):
            group_max_pool(constant(np.zeros((2, 2))), GroupSpec(np.zeros(2, int), 2))


class TestLayerNorm:
    def test_normalized_stats_before_gain_bias(self):
        x = RNG.normal(loc=3.0, scale=4.0, size=(10, 16))
        y = layer_norm(constant(x), constant(np.ones(16)), constant(np.zeros(16))).data
        assert np.max(np.abs(y.mean(axis=1))) < 1e-10
        np.testing.assert_allclose(y.var(axis=1), 1.0, atol=1e-4)


class TestGradCheckHarness:
    def test_sum_of_squares(self):
        x = RNG.normal(size=(1, 6))

        def f(ts):
            return mean(scale(matmul(ts["x"], transpose(ts["x"])), 6.0))

        # mean of the 1x1 product scaled by 6 == sum of squares * 6 / ... ;
        # any smooth scalar works, the analytic gradient must match FD tightly
        assert grad_check(f, {"x": x}) < 1e-8

    def test_eps_bounds(self):
        with pytest.raises(ValueError):
            grad_check(lambda ts: mean(ts["x"]), {"x": np.ones(2)}, eps=1.0)

    def test_does_not_mutate_params(self):
        x = RNG.normal(size=(2, 2))
        keep = x.copy()
        grad_check(lambda ts: mean(ts["x"]), {"x": x})
        np.testing.assert_array_equal(x, keep)


class TestBackwardAllOps:
    """Every op's backward against central differences (< 1e-5)."""

    def check(self, f, params):
        assert grad_check(f, params) < 1e-5

    def test_matmul(self):
        self.check(
            lambda ts: mean(matmul(ts["a"], ts["b"])),
            {"a": RNG.normal(size=(3, 4)), "b": RNG.normal(size=(4, 2))},
        )

    def test_add_same_shape_and_bias(self):
        self.check(
            lambda ts: mean(gelu(add(ts["a"], ts["b"]))),
            {"a": RNG.normal(size=(3, 4)), "b": RNG.normal(size=(3, 4))},
        )
        self.check(
            lambda ts: mean(gelu(add(ts["a"], ts["bias"]))),
            {"a": RNG.normal(size=(3, 4)), "bias": RNG.normal(size=4)},
        )

    def test_scale_concat_slice_transpose(self):
        def f(ts):
            cat = concat([scale(ts["a"], 1.7), transpose(ts["b"])], axis=1)
            return mean(gelu(slice_axis(cat, 1, 1, 5)))

        self.check(f, {"a": RNG.normal(size=(3, 3)), "b": RNG.normal(size=(3, 3))})

    def test_gelu(self):
        self.check(lambda ts: mean(gelu(ts["x"])), {"x": RNG.normal(size=(4, 5))})

    def test_row_softmax(self):
        self.check(
            lambda ts: mean(matmul(row_softmax(ts["x"]), ts["v"])),
            {"x": RNG.normal(size=(4, 4)), "v": RNG.normal(size=(4, 3))},
        )

    def test_masked_row_softmax(self):
        mask = np.array([True, False, True, True])

        def f(ts):
            return mean(matmul(masked_row_softmax(ts["x"], mask), ts["v"]))

        self.check(f, {"x": RNG.normal(size=(4, 4)), "v": RNG.normal(size=(4, 3))})

    def test_layer_norm(self):
        def f(ts):
            return mean(gelu(layer_norm(ts["x"], ts["g"], ts["b"])))

        self.check(
            f,
            {
                "x": RNG.normal(size=(5, 6)),
                "g": RNG.normal(size=6),
                "b": RNG.normal(size=6),
            },
        )

    def test_group_max_pool(self):
        ids = np.array([0, 1, 0, 2, 1, 2, 0])
        spec = GroupSpec(ids, 3)

        def f(ts):
            return mean(gelu(group_max_pool(ts["x"], spec)))

        self.check(f, {"x": RNG.normal(size=(7, 3))})

    def test_group_broadcast_and_gather(self):
        spec = GroupSpec(np.array([0, 1, 1, 0, 2]), 3)
        idx = np.array([4, 0, 0, 2])

        def f(ts):
            return mean(gelu(gather_rows(group_broadcast(ts["y"], spec), idx)))

        self.check(f, {"y": RNG.normal(size=(3, 4))})

    def test_mask_rows(self):
        mask = np.array([True, False, True])
        self.check(
            lambda ts: mean(gelu(mask_rows(ts["x"], mask))),
            {"x": RNG.normal(size=(3, 4))},
        )

    def test_cross_entropy(self):
        labels = np.array([1, 0, 2])
        self.check(
            lambda ts: cross_entropy_with_logits(ts["x"], labels),
            {"x": RNG.normal(size=(3, 3))},
        )


class TestTapeMechanics:
    def test_gradient_accumulates_over_reuse(self):
        tape = Tape()
        x = tape.leaf(np.array([[2.0]]), requires_grad=True)
        y = add(x, x)  # dy/dx = 2
        tape.backward(mean(y))
        np.testing.assert_array_equal(tape.grad(x), [[2.0]])

    def test_constants_get_no_grad(self):
        tape = Tape()
        x = tape.leaf(np.ones((2, 2)), requires_grad=True)
        c = constant(np.ones((2, 2)) * 3)
        tape.backward(mean(add(x, c)))
        np.testing.assert_allclose(tape.grad(x), 0.25 * np.ones((2, 2)))

    def test_mixed_tapes_rejected(self):
        t1, t2 = Tape(), Tape()
        a = t1.leaf(np.ones((1, 1)), requires_grad=True)
        b = t2.leaf(np.ones((1, 1)), requires_grad=True)
        with pytest.raises(ValueError):
            add(a, b)

    def test_nonfinite_op_output_rejected(self):
        big = constant(np.full((1, 1), 1e308))
        with np.errstate(over="ignore"), pytest.raises(NonFiniteInput):
            add(big, big)

    def test_bit_determinism(self):
        x = RNG.normal(size=(6, 6))
        w = RNG.normal(size=(6, 6))

        def run():
            tape = Tape()
            tx = tape.leaf(x, requires_grad=True)
            tw = tape.leaf(w, requires_grad=True)
            out = layer_norm(
                matmul(row_softmax(matmul(tx, tw)), tw),
                constant(np.ones(6)),
                constant(np.zeros(6)),
            )
            loss = mean(gelu(out))
            tape.backward(loss)
            return loss.item(), tape.grad(tx).copy(), tape.grad(tw).copy()

        l1, gx1, gw1 = run()
        l2, gx2, gw2 = run()
        assert l1 == l2
        np.testing.assert_array_equal(gx1, gx2)
        np.testing.assert_array_equal(gw1, gw2)
