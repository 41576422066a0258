import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from visitcast import autodiff as ad
from visitcast.autodiff import AutodiffError, Tensor

from oracles import check_gradients

rng = np.random.default_rng(20240811)


def rand(*shape):
    return rng.uniform(-1.0, 1.0, size=shape)


class TestForwardOps:
    def test_softmax_values(self):
        out = ad.softmax_lastdim(Tensor([1.0, 2.0]))
        np.testing.assert_allclose(out.data, [0.26894, 0.73106], atol=5e-6)

    def test_softmax_symmetry(self):
        out = ad.softmax_lastdim(Tensor([3.7, 3.7, 3.7]))
        np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-12)

    def test_matmul_identity(self):
        a = rand(3, 4)
        out = ad.matmul(Tensor(np.eye(3)), Tensor(a))
        np.testing.assert_array_equal(out.data, a)

    def test_matmul_shape_error(self):
        with pytest.raises(AutodiffError, match="inner dims"):
            ad.matmul(Tensor(rand(2, 3)), Tensor(rand(4, 2)))

    def test_elementwise_shape_error(self):
        with pytest.raises(AutodiffError, match="conform"):
            ad.add(Tensor(rand(3)), Tensor(rand(4)))

    def test_scalar_broadcast_allowed(self):
        out = ad.add(Tensor(rand(3)), Tensor(2.0))
        assert out.data.shape == (3,)

    def test_exp_clamps(self):
        out = ad.texp(Tensor([100.0, -100.0]))
        np.testing.assert_allclose(out.data, [np.exp(50.0), np.exp(-50.0)])

    def test_log_rejects_nonpositive(self):
        with pytest.raises(AutodiffError, match="log"):
            ad.tlog(Tensor([1.0, 0.0]))

    def test_div_rejects_zero(self):
        with pytest.raises(AutodiffError, match="zero"):
            ad.div(Tensor(1.0), Tensor(0.0))

    @given(st.lists(st.floats(-30, 30), min_size=1, max_size=8))
    @settings(max_examples=200, deadline=None)
    def test_softmax_is_simplex(self, xs):
        out = ad.softmax_lastdim(Tensor(xs)).data
        assert np.all(out >= 0)
        assert abs(out.sum() - 1.0) < 1e-9


class TestBackward:
    def test_sum_of_squares(self):
        x = ad.parameter([1.0, 2.0, 3.0])
        ad.backward(ad.tsum(x * x))
        np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])

    def test_sum_gives_ones(self):
        x = ad.parameter(rand(5))
        ad.backward(ad.tsum(x))
        np.testing.assert_array_equal(x.grad, np.ones(5))

    def test_sigmoid_at_zero(self):
        x = ad.parameter(0.0)
        ad.backward(ad.sigmoid(x))
        np.testing.assert_allclose(x.grad, 0.25)

    def test_non_scalar_loss_rejected(self):
        x = ad.parameter(rand(3))
        y = x * 2.0
        with pytest.raises(AutodiffError, match="scalar"):
            ad.backward(y)

    def test_loss_off_tape_rejected(self):
        with pytest.raises(AutodiffError):
            ad.backward(Tensor(1.0))

    def test_tape_isolation(self):
        x = ad.parameter([1.0, 2.0])
        ad.backward(ad.tsum(x * x))
        first = x.grad.copy()
        x.grad = None
        ad.backward(ad.tsum(x * x))
        np.testing.assert_array_equal(x.grad, first)
        assert len(ad.active_tape()) == 0

    def test_determinism(self):
        def run():
            r = np.random.default_rng(7)
            x = ad.parameter(r.uniform(-1, 1, 4))
            w = ad.parameter(r.uniform(-1, 1, (4, 3)))
            loss = ad.tsum(ad.sigmoid(ad.matmul(x, w)))
            ad.backward(loss)
            return loss.item(), x.grad.copy(), w.grad.copy()

        l1, gx1, gw1 = run()
        l2, gx2, gw2 = run()
        assert l1 == l2
        np.testing.assert_array_equal(gx1, gx2)
        np.testing.assert_array_equal(gw1, gw2)

    def test_no_grad_suppresses_tape(self):
        x = ad.parameter(rand(3))
        with ad.no_grad():
            y = ad.tsum(x * x)
        assert not y.requires_grad
        assert len(ad.active_tape()) == 0


class TestGradientChecks:
    """Finite-difference oracle over every op used by the model."""

    def test_arithmetic(self):
        a = ad.parameter(rand(4))
        b = ad.parameter(rand(4))
        c = ad.parameter(rand())
        check_gradients(
            lambda: ad.tsum((a + b) * (a - b) + a / (b + 3.0) * c), [a, b, c])

    def test_matmul_all_arities(self):
        m = ad.parameter(rand(3, 4))
        n = ad.parameter(rand(4, 2))
        v = ad.parameter(rand(4))
        u = ad.parameter(rand(3))
        check_gradients(lambda: ad.tsum(ad.matmul(m, n)), [m, n])
        check_gradients(lambda: ad.tsum(ad.matmul(m, v)), [m, v])
        check_gradients(lambda: ad.tsum(ad.matmul(u, m)), [u, m])
        check_gradients(lambda: ad.matmul(v, v), [v])

    def test_activations(self):
        x = ad.parameter(rand(6))
        check_gradients(lambda: ad.tsum(ad.sigmoid(x) * ad.tanh(x)), [x])
        check_gradients(lambda: ad.tsum(ad.texp(x)), [x])
        y = ad.parameter(rng.uniform(0.5, 2.0, 6))
        check_gradients(lambda: ad.tsum(ad.tlog(y)), [y])

    def test_softmax(self):
        x = ad.parameter(rand(5))
        w = ad.parameter(rand(5))
        check_gradients(
            lambda: ad.matmul(ad.softmax_lastdim(x), w), [x, w])

    def test_shape_ops(self):
        a = ad.parameter(rand(3))
        b = ad.parameter(rand())
        m = ad.parameter(rand(4, 3))

        def build():
            vec = ad.concat([a, b, a * 2.0])
            rows = ad.take_rows(m, np.array([0, 2, 2]))
            stacked = ad.stack_rows([a, rows[1], a + 1.0])
            return ad.tsum(stacked) + ad.tmean(vec) + ad.tsum(m[1:3, :2])

        check_gradients(build, [a, b, m])

    def test_clip(self):
        x = ad.parameter(np.array([-0.9, 0.1, 0.9]))
        check_gradients(lambda: ad.tsum(ad.clip(x, -0.5, 0.5) * x), [x])

    def test_gru_cell_composite(self):
        d, k = 4, 3
        r = np.random.default_rng(3)
        W = ad.parameter(r.uniform(-1, 1, (k, 3 * d)))
        U = ad.parameter(r.uniform(-1, 1, (d, 3 * d)))
        bias = ad.parameter(r.uniform(-1, 1, 3 * d))
        x = ad.parameter(r.uniform(-1, 1, k))
        h0 = ad.parameter(r.uniform(-1, 1, d))

        def build():
            gx = ad.matmul(x, W) + bias
            gh = ad.matmul(h0, U)
            z = ad.sigmoid(gx[0:d] + gh[0:d])
            rr = ad.sigmoid(gx[d:2 * d] + gh[d:2 * d])
            n = ad.tanh(gx[2 * d:] + rr * gh[2 * d:])
            return ad.tsum((1.0 - z) * h0 + z * n)

        check_gradients(build, [W, U, bias, x, h0])

    def test_attention_composite(self):
        d = 3
        r = np.random.default_rng(4)
        hs = [ad.parameter(r.uniform(-1, 1, d)) for _ in range(3)]
        s = ad.parameter(r.uniform(-1, 1, d))
        W = ad.parameter(r.uniform(-1, 1, (2 * d, d)))
        v = ad.parameter(r.uniform(-1, 1, d))

        def build():
            scores = [ad.matmul(v, ad.tanh(ad.matmul(ad.concat([s, h]), W)))
                      for h in hs]
            theta = ad.softmax_lastdim(ad.concat(scores))
            z = ad.matmul(theta, ad.stack_rows(hs))
            return ad.tsum(ad.tanh(z))

        check_gradients(build, hs + [s, W, v])

    def test_log_sigmoid_chain(self):
        x = ad.parameter(rand(5))

        def build():
            return ad.tsum(ad.neg(ad.tlog(ad.texp(ad.neg(x)) + 1.0)))

        check_gradients(build, [x])


class TestAdam:
    def test_zero_grad_zero_param_unchanged(self):
        p = ad.parameter(0.0)
        state = ad.AdamState()
        for _ in range(5):
            p.grad = np.zeros(())
            ad.adam_step([p], state)
        assert p.item() == 0.0

    def test_zero_grad_no_decay_unchanged(self):
        p = ad.parameter(1.7)
        state = ad.AdamState(weight_decay=0.0)
        p.grad = np.zeros(())
        ad.adam_step([p], state)
        assert p.item() == 1.7

    def test_first_step_is_signed_lr(self):
        for g in (0.5, -2.0):
            p = ad.parameter(0.0)
            state = ad.AdamState()
            p.grad = np.asarray(g)
            ad.adam_step([p], state)
            np.testing.assert_allclose(p.item(), -state.lr * np.sign(g), rtol=1e-6)

    def test_missing_grad_rejected(self):
        p = ad.parameter(1.0)
        with pytest.raises(AutodiffError, match="no gradient"):
            ad.adam_step([p], ad.AdamState())

    def test_grads_zeroed_after_step(self):
        p = ad.parameter(1.0)
        p.grad = np.asarray(0.3)
        ad.adam_step([p], ad.AdamState())
        assert p.grad is None

    def test_step_count_increases(self):
        p = ad.parameter(1.0)
        state = ad.AdamState()
        for expect in (1, 2, 3):
            p.grad = np.asarray(1.0)
            ad.adam_step([p], state)
            assert state.step == expect
