import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccv.tensor import Adam, AdamState, Graph, Tensor, adam_step, gradcheck, ops

F64 = np.float64


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=F64), requires_grad=grad, dtype=F64)


def grads_of(fn, *leaves):
    for x in leaves:
        x.requires_grad = True
        x.zero_grad()
    with Graph() as g:
        loss = fn()
    g.backward(loss)
    return [x.grad.copy() for x in leaves]


class TestTensor:
    def test_grad_zero_on_creation(self):
        x = Tensor(np.ones((2, 3)), requires_grad=True)
        assert x.grad.shape == (2, 3)
        assert not x.grad.any()

    def test_zero_grad_resets(self):
        x = t64([1.0, 2.0])
        x.grad += 3
        x.zero_grad()
        assert not x.grad.any()

    def test_default_precision_is_32_bit(self):
        assert Tensor([1.0, 2.0]).dtype == np.float32

    def test_no_graph_records_nothing(self):
        x = t64([1.0])
        y = ops.mul(x, x)
        assert y.node is None


class TestConv2d:
    def test_identity_kernel(self):
        x = np.random.default_rng(0).random((3, 5, 5))
        k = np.zeros((3, 3, 1, 1))
        k[[0, 1, 2], [0, 1, 2]] = 1
        out = ops.conv2d(t64(x, False), t64(k, False), t64(np.zeros(3), False))
        np.testing.assert_array_equal(out.data, x)

    def test_constant_input_interior_sum(self):
        out = ops.conv2d(t64(np.full((1, 5, 5), 0.7), False), t64(np.ones((1, 1, 3, 3)), False))
        assert out.shape == (1, 5, 5)
        assert out.data[0, 2, 2] == pytest.approx(9 * 0.7, abs=1e-12)
        # corner sees a 2x2 patch under zero padding
        assert out.data[0, 0, 0] == pytest.approx(4 * 0.7, abs=1e-12)

    def test_matches_direct_cross_correlation(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 6, 7))
        k = rng.normal(size=(3, 2, 3, 5))
        b = rng.normal(size=3)
        out = ops.conv2d(t64(x, False), t64(k, False), t64(b, False)).data
        xp = np.pad(x, ((0, 0), (1, 1), (2, 2)))
        ref = np.zeros((3, 6, 7))
        for o in range(3):
            for i in range(6):
                for j in range(7):
                    ref[o, i, j] = (xp[:, i:i + 3, j:j + 5] * k[o]).sum() + b[o]
        np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)

    def test_batched_equals_per_item(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(4, 2, 8, 8)).astype(np.float32)
        k = Tensor(rng.normal(size=(3, 2, 3, 3)).astype(np.float32))
        batched = ops.conv2d(Tensor(x), k).data
        for i in range(4):
            assert np.array_equal(batched[i], ops.conv2d(Tensor(x[i]), k).data)

    def test_channel_mismatch_names_dimension(self):
        with pytest.raises(ValueError, match="input channels 2 != kernel in-channels 3"):
            ops.conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError, match="odd"):
            ops.conv2d(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2))))

    def test_input_gradient_finite_differences(self):
        rng = np.random.default_rng(3)
        x = t64(rng.normal(size=(1, 2, 5, 5)))
        k = t64(rng.normal(size=(3, 2, 3, 3)))
        b = t64(rng.normal(size=3))
        errs = gradcheck.check(lambda: ops.mean(ops.conv2d(x, k, b)), [x, k, b])
        assert max(errs) < 1e-6


class TestElementwise:
    def test_sigmoid_values(self):
        out = ops.sigmoid(t64([0.0, 20.0, -800.0], False)).data
        assert out[0] == 0.5
        assert abs(out[1] - 1.0) < 1e-8
        assert out[2] >= 0.0

    def test_sigmoid_slope_at_zero(self):
        x = t64([0.0])
        (g,) = grads_of(lambda: ops.sum(ops.sigmoid(x)), x)
        assert g[0] == 0.25
        assert gradcheck.numerical_grad(lambda: ops.sum(ops.sigmoid(x)), x)[0] == pytest.approx(0.25, abs=1e-9)

    def test_relu_gradient_is_step(self):
        x = t64([-1.0, 0.5, 2.0])
        (g,) = grads_of(lambda: ops.sum(ops.relu(x)), x)
        np.testing.assert_array_equal(g, [0.0, 1.0, 1.0])

    def test_only_scalar_broadcast(self):
        with pytest.raises(ValueError):
            ops.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3,))))
        np.testing.assert_array_equal(ops.add(Tensor(np.zeros((2, 3))), 1.5).data, np.full((2, 3), 1.5))

    def test_binary_entropy_at_half(self):
        assert ops.mean(ops.binary_entropy(t64(np.full(4, 0.5), False))).item() == pytest.approx(np.log(2))


class TestReductions:
    def test_mean_values(self):
        assert ops.mean_reduce(t64([1.0, 2.0, 3.0], False)).item() == 2.0
        assert ops.mean_reduce(t64([7.25], False)).item() == 7.25

    def test_mean_gradient(self):
        x = t64(np.arange(4.0))
        (g,) = grads_of(lambda: ops.mean_reduce(x), x)
        np.testing.assert_array_equal(g, np.full(4, 0.25))

    def test_empty_mean_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            ops.mean_reduce(t64(np.zeros(0), False))

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 24), st.integers(0, 2 ** 32 - 1))
    def test_order_invariant_mean_is_bit_exact_under_permutation(self, n, seed):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(n, 5)).astype(np.float32) * 10 ** rng.uniform(-3, 3, size=(n, 1)).astype(np.float32)
        base = ops.mean(Tensor(a), axis=0, order_invariant=True).data
        perm = rng.permutation(n)
        assert np.array_equal(base, ops.mean(Tensor(a[perm]), axis=0, order_invariant=True).data)

    @pytest.mark.parametrize("copies", [2, 3, 7, 16, 40])
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_duplicate_mean_is_exact(self, copies, dtype):
        a = np.random.default_rng(4).normal(size=(1, 9)).astype(dtype)
        dup = np.repeat(a, copies, axis=0)
        assert np.array_equal(ops.mean(Tensor(dup), axis=0, order_invariant=True).data, a[0])
        assert ops.mean(Tensor(dup[:, 0]), order_invariant=True).item() == a[0, 0]


class TestShapes:
    def test_concat_mismatch_names_dimension(self):
        with pytest.raises(ValueError, match="dimension 1"):
            ops.concat([Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 5, 4)))], axis=0)

    def test_pool_then_upsample(self):
        x = np.arange(16.0).reshape(1, 4, 4)
        pooled = ops.avg_pool2(t64(x, False)).data
        np.testing.assert_array_equal(pooled, [[[2.5, 4.5], [10.5, 12.5]]])
        up = ops.upsample2(t64(pooled, False)).data
        assert up.shape == (1, 4, 4)
        assert up[0, 1, 1] == 2.5 and up[0, 3, 3] == 12.5

    def test_odd_pool_rejected(self):
        with pytest.raises(ValueError):
            ops.avg_pool2(Tensor(np.zeros((1, 5, 4))))


class TestBackward:
    def test_fan_out_accumulates(self):
        x = t64([3.0])
        (g,) = grads_of(lambda: ops.sum(ops.add(x, x)), x)
        assert g[0] == 2.0

    @pytest.mark.parametrize("k", [1, 2, 5])
    def test_k_uses_give_k_times_gradient(self, k):
        x = t64(np.random.default_rng(k).normal(size=6))
        (single,) = grads_of(lambda: ops.sum(ops.sigmoid(x)), x)

        def fn():
            acc = ops.sigmoid(x)
            for _ in range(k - 1):
                acc = ops.add(acc, ops.sigmoid(x))
            return ops.sum(acc)

        (multi,) = grads_of(fn, x)
        np.testing.assert_allclose(multi, k * single, rtol=1e-15)

    def test_detach_blocks_gradient(self):
        x = t64(np.arange(1.0, 5.0))
        d = ops.detach(x)
        assert np.array_equal(d.data, x.data)
        x.zero_grad()
        with Graph() as g:
            loss = ops.mean(ops.detach(x))
        # nothing upstream of the loss requires grad, so nothing was recorded
        assert loss.node is None and not g.nodes
        assert not x.grad.any()
        w = t64([2.0])
        (gx, gw) = grads_of(lambda: ops.mean(ops.mul(ops.detach(x), w)), x, w)
        assert not gx.any() and gw[0] == 2.5
        (g,) = grads_of(lambda: ops.mean(ops.add(x, ops.detach(x))), x)
        np.testing.assert_array_equal(g, np.full(4, 0.25))

    def test_non_scalar_loss_rejected(self):
        x = t64([1.0, 2.0])
        with Graph() as g:
            y = ops.mul(x, 2.0)
        with pytest.raises(ValueError, match="scalar"):
            g.backward(y)

    def test_foreign_loss_rejected(self):
        x = t64([1.0])
        with Graph():
            y = ops.sum(ops.mul(x, 2.0))
        with Graph() as other:
            ops.sum(ops.mul(x, 3.0))
        with pytest.raises(ValueError, match="not produced by this graph"):
            other.backward(y)

    def test_each_node_visited_once(self):
        x = t64([0.3, -0.2])
        with Graph() as g:
            h = ops.sigmoid(x)
            loss = ops.sum(ops.mul(h, h))
        calls = []
        for node in g.nodes:
            fn = node.backward

            def wrapped(grad, fn=fn, node=node):
                calls.append(id(node))
                return fn(grad)
            node.backward = wrapped
        g.backward(loss)
        assert len(calls) == len(set(calls)) == len(g.nodes)

    def test_deterministic(self):
        rng = np.random.default_rng(5)
        x = t64(rng.normal(size=(1, 2, 6, 6)))
        k = t64(rng.normal(size=(2, 2, 3, 3)))
        fn = lambda: ops.mean(ops.sigmoid(ops.conv2d(x, k)))  # noqa: E731
        a = grads_of(fn, x, k)
        b = grads_of(fn, x, k)
        assert all(np.array_equal(u, v) for u, v in zip(a, b))

    def test_graphs_are_thread_local(self):
        x = t64([1.0, 2.0])
        errors = []

        def worker():
            try:
                with Graph() as g:
                    loss = ops.sum(ops.mul(x, x))
                assert len(g.nodes) == 2
                assert loss.node is not None
            except AssertionError as exc:  # pragma: no cover
                errors.append(exc)

        threads = [threading.Thread(target=worker) for _ in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert not errors


class TestAdam:
    def test_zero_gradient_leaves_params_unchanged(self):
        p = t64([1.0, -2.0])
        state = AdamState.for_params([p])
        state.m[0][:] = [0.5, 0.5]
        state.v[0][:] = [0.25, 0.25]
        adam_step([p], [np.zeros(2)], state, lr=0.1)
        np.testing.assert_array_equal(state.m[0], [0.45, 0.45])
        np.testing.assert_allclose(state.v[0], [0.24975, 0.24975], rtol=1e-15)
        fresh = t64([1.0, -2.0])
        adam_step([fresh], [np.zeros(2)], AdamState.for_params([fresh]), lr=0.1)
        np.testing.assert_array_equal(fresh.data, [1.0, -2.0])
        assert state.step == 1

    def test_first_step_moves_lr_against_sign(self):
        p = t64([0.0, 0.0, 0.0])
        adam_step([p], [np.array([3.0, -0.01, 250.0])], AdamState.for_params([p]), lr=0.01)
        np.testing.assert_allclose(p.data, [-0.01, 0.01, -0.01], rtol=1e-5)

    def test_two_steps_on_square(self):
        # f(w) = w^2 from w = 1, lr 0.1, betas (0.9, 0.999), eps 1e-8, computed by hand:
        # step 1: g = 2, m_hat = 2, v_hat = 4, w = 1 - 0.1 * 2 / (2 + 1e-8)
        # step 2: g = 2 w, m = 0.18 + 0.1 g, v = 0.003996 + 0.001 g^2, corrections 0.19 and 0.001999
        w = t64([1.0])
        opt = Adam([w], lr=0.1)
        trace = []
        for _ in range(2):
            opt.zero_grad()
            with Graph() as g:
                loss = ops.sum(ops.mul(w, w))
            g.backward(loss)
            opt.step()
            trace.append(w.data[0])
        assert trace[0] == pytest.approx(0.9000000005, abs=1e-15)
        assert trace[1] == pytest.approx(0.8004122286917928, abs=1e-14)

    def test_shape_mismatch(self):
        p = t64([1.0, 2.0])
        with pytest.raises(ValueError, match="shape mismatch"):
            adam_step([p], [np.zeros(3)], AdamState.for_params([p]), lr=0.1)


class TestGradcheck:
    @pytest.mark.parametrize("name", sorted(gradcheck.primitive_cases(np.random.default_rng(0))))
    def test_primitive(self, name):
        fn, inputs = gradcheck.primitive_cases(np.random.default_rng(0))[name]
        assert max(gradcheck.check(fn, inputs)) < 1e-6

    @pytest.mark.parametrize("seed", range(20))
    def test_random_graph(self, seed):
        fn, leaves = gradcheck.random_graph(np.random.default_rng(100 + seed))
        assert all(x.size <= 64 for x in leaves)
        assert max(gradcheck.check(fn, leaves)) < 1e-6

    def test_relative_error_floor(self):
        assert gradcheck.relative_error(np.array([1e-12]), np.array([-1e-12])) < 1e-8
        assert gradcheck.relative_error(np.array([1.0, 0.0]), np.array([1.0, 1e-3])) == pytest.approx(1e-3)
