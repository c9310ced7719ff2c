"""Tape, primitives, higher-order gradients, and pass accounting."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special

import robustgrad.autodiff as ad
from robustgrad.autodiff import Tensor


def fd_check(f, x, rel=1e-6, h=1e-5, floor=1e-8):
    """Gradient of f at x versus central differences, elementwise."""
    with ad.Tape() as tape:
        out = f(Tensor(x.data.copy(), requires_grad=False) if False else x)
        (g,) = tape.gradient(out, [x])
    ref = ad.finite_difference_gradient(f, x, h=h).numpy()
    got = g.numpy()
    denom = np.maximum(np.abs(ref), floor)
    mask = np.abs(ref) > floor
    assert np.all(np.abs(got - ref)[mask] / denom[mask] < rel), (
        np.max(np.abs(got - ref)[mask] / denom[mask]))
    assert np.all(np.abs(got[~mask] - ref[~mask]) < 1e-6)
    return got


arrays = st.lists(st.floats(-2.0, 2.0), min_size=2, max_size=6).map(
    lambda v: np.asarray(v, dtype=np.float64))


class TestTensor:
    def test_dtype_coercion(self):
        assert Tensor([1, 2, 3]).numpy().dtype == np.float64
        assert Tensor(np.zeros(2, dtype=np.float32)).numpy().dtype == np.float32

    def test_detach_drops_grad_flag(self):
        x = Tensor([1.0], requires_grad=True)
        assert not x.detach().requires_grad

    def test_operator_sugar_matches_primitives(self):
        x = Tensor([2.0])
        assert float(((x + 1) * 3 - 2 / x).numpy()[0]) == pytest.approx(8.0)
        assert float((x ** 2).numpy()[0]) == 4.0
        assert float((-x).numpy()[0]) == -2.0


class TestFirstOrder:
    def test_polynomial_exact(self):
        x = Tensor([1.5, -0.5], requires_grad=True)
        with ad.Tape() as tape:
            y = ad.sum_(ad.sub(ad.pow_(x, 3), ad.mul(x, 2.0)))
            (g,) = tape.gradient(y, [x])
        assert np.allclose(g.numpy(), 3 * np.array([1.5, -0.5]) ** 2 - 2, atol=1e-14)

    @pytest.mark.parametrize("op", [ad.exp, ad.tanh, ad.sigmoid, ad.softplus,
                                    ad.erf, ad.sqrt, ad.abs_])
    def test_unary_ops_match_fd(self, op):
        base = np.array([0.3, 1.1, 0.7, 1.9])
        x = Tensor(base, requires_grad=True)
        fd_check(lambda t: ad.sum_(op(t)), x)

    def test_log_and_div(self):
        x = Tensor(np.array([0.5, 1.5, 2.5]), requires_grad=True)
        fd_check(lambda t: ad.sum_(ad.log(t)), x)
        fd_check(lambda t: ad.sum_(ad.div(1.0, t)), x)

    @given(a=arrays, b=arrays)
    @settings(max_examples=25, deadline=None)
    def test_mul_broadcast_scalar(self, a, b):
        x = Tensor(a, requires_grad=True)
        c = Tensor(b[:1])
        with ad.Tape() as tape:
            y = ad.sum_(ad.mul(x, c))
            (g,) = tape.gradient(y, [x])
        assert np.allclose(g.numpy(), np.broadcast_to(b[:1], a.shape), atol=1e-12)

    def test_broadcast_add_reduces_grad(self):
        x = Tensor(np.ones((3, 4)), requires_grad=True)
        row = Tensor(np.arange(4.0), requires_grad=True)
        with ad.Tape() as tape:
            y = ad.sum_(ad.add(x, row))
            gx, grow = tape.gradient(y, [x, row])
        assert np.array_equal(gx.numpy(), np.ones((3, 4)))
        assert np.array_equal(grow.numpy(), np.full(4, 3.0))

    def test_softplus_grad_at_zero_is_half(self):
        x = Tensor([0.0], requires_grad=True)
        with ad.Tape() as tape:
            y = ad.sum_(ad.softplus(x))
            (g,) = tape.gradient(y, [x])
        assert g.numpy()[0] == 0.5

    def test_abs_and_sign_at_zero(self):
        x = Tensor([0.0, -1.0, 2.0], requires_grad=True)
        with ad.Tape() as tape:
            y = ad.sum_(ad.abs_(x))
            (g,) = tape.gradient(y, [x])
        assert np.array_equal(g.numpy(), [0.0, -1.0, 1.0])
        with ad.Tape() as tape:
            y = ad.sum_(ad.sign(x))
            (g,) = tape.gradient(y, [x])
        assert np.array_equal(g.numpy(), np.zeros(3))

    def test_maximum_tie_goes_to_first_argument(self):
        a = Tensor([1.0, 3.0], requires_grad=True)
        b = Tensor([1.0, 5.0], requires_grad=True)
        with ad.Tape() as tape:
            y = ad.sum_(ad.maximum(a, b))
            ga, gb = tape.gradient(y, [a, b])
        assert np.array_equal(ga.numpy(), [1.0, 0.0])
        assert np.array_equal(gb.numpy(), [0.0, 1.0])

    def test_max_reduce_uses_first_argmax(self):
        x = Tensor([[2.0, 2.0, 1.0]], requires_grad=True)
        with ad.Tape() as tape:
            y = ad.sum_(ad.max_reduce(x, axis=1))
            (g,) = tape.gradient(y, [x])
        assert np.array_equal(g.numpy(), [[1.0, 0.0, 0.0]])

    def test_matmul_fd(self):
        rng = np.random.default_rng(0)
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        fd_check(lambda t: ad.sum_(ad.mul(ad.matmul(t, b), ad.matmul(t, b))), a, rel=1e-5)

    def test_conv2d_fd_both_arguments(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(size=(2, 2, 5, 5)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 2, 3, 3)) * 0.5, requires_grad=True)

        def loss_x(t):
            return ad.sum_(ad.mul(ad.conv2d(t, w, padding=1),
                                  ad.conv2d(t, w, padding=1)))

        def loss_w(t):
            return ad.sum_(ad.mul(ad.conv2d(x, t, padding=1),
                                  ad.conv2d(x, t, padding=1)))

        fd_check(loss_x, x, rel=1e-5)
        fd_check(loss_w, w, rel=1e-5)

    def test_avg_pool_and_reshape(self):
        x = Tensor(np.arange(16.0).reshape(1, 1, 4, 4), requires_grad=True)
        with ad.Tape() as tape:
            y = ad.sum_(ad.avg_pool2d(x, 2))
            (g,) = tape.gradient(y, [x])
        assert np.allclose(g.numpy(), 0.25)

    def test_log_softmax_rows_normalize(self):
        z = Tensor(np.array([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]]))
        p = np.exp(ad.log_softmax(z).numpy())
        assert np.allclose(p.sum(axis=1), 1.0, atol=1e-12)
        x = Tensor(np.array([[0.5, -1.0, 2.0]]), requires_grad=True)
        fd_check(lambda t: ad.sum_(ad.mul(ad.log_softmax(t), ad.log_softmax(t))), x,
                 rel=1e-5)

    def test_pad_flip_getitem_embed(self):
        x = Tensor(np.arange(4.0).reshape(1, 1, 2, 2), requires_grad=True)
        padded = ad.pad2d(x, 1)
        assert padded.shape == (1, 1, 4, 4)
        assert padded.numpy()[0, 0, 0, 0] == 0.0
        flipped = ad.flip(Tensor([1.0, 2.0, 3.0]), 0)
        assert np.array_equal(flipped.numpy(), [3.0, 2.0, 1.0])
        with ad.Tape() as tape:
            y = ad.sum_(ad.getitem(x, (0, 0, slice(0, 1))))
            (g,) = tape.gradient(y, [x])
        expect = np.zeros((1, 1, 2, 2))
        expect[0, 0, 0, :] = 1.0
        assert np.array_equal(g.numpy(), expect)

    def test_erf_tanh_sigmoid_against_scipy(self):
        z = np.linspace(-2, 2, 7)
        assert np.allclose(ad.erf(Tensor(z)).numpy(), special.erf(z), atol=1e-15)
        assert np.allclose(ad.sigmoid(Tensor(z)).numpy(), special.expit(z), atol=1e-15)
        assert np.allclose(ad.tanh(Tensor(z)).numpy(), np.tanh(z), atol=1e-15)

    def test_disconnected_target_gets_zeros(self):
        x = Tensor([1.0], requires_grad=True)
        z = Tensor([5.0], requires_grad=True)
        with ad.Tape() as tape:
            y = ad.sum_(ad.mul(x, x))
            gz = tape.gradient(y, [z])[0]
        assert np.array_equal(gz.numpy(), [0.0])

    def test_nonscalar_output_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with ad.Tape() as tape:
            y = ad.mul(x, x)
            with pytest.raises(ad.NonScalarOutputError):
                tape.gradient(y, [x])

    def test_gradient_request_wrapper(self):
        x = Tensor([3.0], requires_grad=True)
        with ad.Tape() as tape:
            y = ad.sum_(ad.mul(x, x))
            req = ad.GradientRequest(output=y, wrt=(x,))
            (g,) = ad.gradient(tape, req)
        assert g.numpy()[0] == 6.0

    def test_fd_oracle_quadratic_convergence(self):
        x = Tensor([1.0])
        f = lambda t: ad.sum_(ad.pow_(t, 3))
        err_big = abs(ad.finite_difference_gradient(f, x, h=1e-2).numpy()[0] - 3.0)
        err_small = abs(ad.finite_difference_gradient(f, x, h=1e-3).numpy()[0] - 3.0)
        assert err_small < err_big / 50  # central differences are O(h^2)


class TestTapeSemantics:
    def test_inner_tape_does_not_leak_to_outer(self):
        x = Tensor([2.0], requires_grad=True)
        with ad.Tape() as outer:
            y = ad.mul(x, x)
            with ad.Tape() as inner:
                z = ad.sum_(ad.mul(x, x))
                (gi,) = inner.gradient(z, [x])
            assert gi.numpy()[0] == 4.0
            (go,) = outer.gradient(ad.sum_(y), [x])
        assert go.numpy()[0] == 4.0

    def test_stop_recording_suppresses_nodes(self):
        x = Tensor([2.0], requires_grad=True)
        with ad.Tape() as tape:
            with ad.stop_recording():
                _ = ad.mul(x, x)
            assert len(tape) == 0
            y = ad.sum_(ad.mul(x, x))
            (g,) = tape.gradient(y, [x])
        assert g.numpy()[0] == 4.0

    def test_grad_of_linear_combination_is_linear(self):
        rng = np.random.default_rng(2)
        base = rng.normal(size=4)
        x = Tensor(base, requires_grad=True)

        def grad_of(f):
            with ad.Tape() as tape:
                (g,) = tape.gradient(f(x), [x])
            return g.numpy()

        f1 = lambda t: ad.sum_(ad.exp(t))
        f2 = lambda t: ad.sum_(ad.mul(t, t))
        combo = lambda t: ad.add(ad.mul(f1(t), 2.0), ad.mul(f2(t), -3.0))
        assert np.allclose(grad_of(combo), 2 * grad_of(f1) - 3 * grad_of(f2), atol=1e-12)


class TestHigherOrder:
    def test_double_backprop_quartic(self):
        # d/dx sum((2x)^2) = 8x when g = d/dx sum(x^2) = 2x
        x = Tensor([1.0, -2.0, 0.5], requires_grad=True)
        with ad.Tape() as tape:
            y = ad.sum_(ad.mul(x, x))
            (g,) = tape.gradient(y, [x], create_graph=True)
            z = ad.sum_(ad.mul(g, g))
            (gg,) = tape.gradient(z, [x])
        assert np.allclose(gg.numpy(), 8 * x.numpy(), atol=1e-12)

    def test_hvp_exact_on_quadratic_form(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(4, 4))
        hess = a + a.T
        x = Tensor(rng.normal(size=4), requires_grad=True)
        v = Tensor(rng.normal(size=4))
        with ad.Tape() as tape:
            ax = ad.matmul(ad.reshape(x, (1, 4)), Tensor(a))
            y = ad.sum_(ad.mul(ad.reshape(ax, (4,)), x))
            hv = ad.hessian_vector_product(tape, y, x, v)
        assert np.allclose(hv.numpy(), hess @ v.numpy(), atol=1e-10)

    def test_hvp_shape_mismatch(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        v = Tensor([1.0])
        with ad.Tape() as tape:
            y = ad.sum_(ad.mul(x, x))
            with pytest.raises(ad.ShapeMismatchError):
                ad.hessian_vector_product(tape, y, x, v)

    def test_grad_of_input_grad_norm_through_nonlinearity(self):
        # parameter gradient of ||d loss/d input||^2, checked against FD
        rng = np.random.default_rng(4)
        w = Tensor(rng.normal(size=(3, 3)) * 0.6, requires_grad=True)
        x0 = rng.normal(size=(2, 3))

        def penalty(wt):
            x = Tensor(x0, requires_grad=True)
            with ad.Tape() as tape:
                y = ad.sum_(ad.tanh(ad.matmul(x, wt)))
                (gx,) = tape.gradient(y, [x], create_graph=True)
                return ad.sum_(ad.mul(gx, gx))

        with ad.Tape() as tape:
            value = penalty(w)
            (gw,) = tape.gradient(value, [w])
        ref = ad.finite_difference_gradient(penalty, w, h=1e-5).numpy()
        rel = np.abs(gw.numpy() - ref) / np.maximum(np.abs(ref), 1e-8)
        assert rel.max() < 1e-5


class TestPassAccounting:
    def test_forward_scope_counts_one(self):
        with ad.count_passes() as counter:
            with ad.forward_pass_scope():
                pass
        assert counter.forward == 1 and counter.backward == 0

    def test_plain_backward_costs_one_unit(self):
        x = Tensor([1.0], requires_grad=True)
        with ad.count_passes() as counter:
            with ad.Tape() as tape:
                with ad.forward_pass_scope():
                    y = ad.sum_(ad.mul(x, x))
                tape.gradient(y, [x])
        assert counter.forward == 1 and counter.backward == 1

    def test_double_backprop_costs_forward_plus_adjoint(self):
        # sweep 1 touches the forward segment (1); sweep 2 touches the
        # forward segment (1) and the adjoint segment (2): 4 units total
        x = Tensor([1.0, 2.0], requires_grad=True)
        with ad.count_passes() as counter:
            with ad.Tape() as tape:
                with ad.forward_pass_scope():
                    y = ad.sum_(ad.mul(x, x))
                (g,) = tape.gradient(y, [x], create_graph=True)
                z = ad.sum_(ad.mul(g, g))
                tape.gradient(z, [x])
        assert counter.forward == 1
        assert counter.backward == 4

    def test_loss_head_outside_scope_costs_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with ad.count_passes() as counter:
            with ad.Tape() as tape:
                y = ad.sum_(ad.mul(x, x))  # never inside a forward scope
                tape.gradient(y, [x])
        assert counter.forward == 0 and counter.backward == 0

    def test_nested_counters_both_tally(self):
        with ad.count_passes() as outer:
            with ad.count_passes() as inner:
                with ad.forward_pass_scope():
                    pass
            with ad.forward_pass_scope():
                pass
        assert inner.forward == 1 and outer.forward == 2


class TestRandomNetsMini:
    def test_small_random_nets_match_fd(self):
        # a fast cousin of the full 50-net oracle: 5 nets, mixed ops
        rng = np.random.default_rng(7)
        for trial in range(5):
            w1 = Tensor(rng.normal(size=(4, 5)) * 0.5, requires_grad=True)
            w2 = Tensor(rng.normal(size=(5, 3)) * 0.5, requires_grad=True)
            x0 = rng.normal(size=(2, 4))

            def f(wt, other=w2,第=None):
                h = ad.tanh(ad.matmul(Tensor(x0), wt))
                out = ad.matmul(h, other)
                return ad.sum_(ad.log_softmax(out))

            with ad.Tape() as tape:
                y = f(w1)
                (g,) = tape.gradient(y, [w1])
            ref = ad.finite_difference_gradient(f, w1).numpy()
            rel = np.abs(g.numpy() - ref) / np.maximum(np.abs(ref), 1e-8)
            assert rel[np.abs(ref) > 1e-8].max() < 1e-6
