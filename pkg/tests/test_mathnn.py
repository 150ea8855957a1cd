import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from littrack import mathnn
from littrack.mathnn import AdamState, Layer, MlpParams


def random_net(seed, dims=(4, 8, 6, 3), acts=("elu", "tanh", "identity")):
    rng = np.random.default_rng(seed)
    return mathnn.make_mlp(rng, list(dims), list(acts)), rng


class TestForward:
    def test_identity_layer_passes_input_through(self):
        net = MlpParams([Layer(np.eye(2), np.zeros(2), "identity")])
        out = mathnn.mlp_forward(net, np.array([1.0, 2.0]))
        assert np.array_equal(out, [1.0, 2.0])

    def test_zero_weights_return_bias(self):
        net = MlpParams([Layer(np.zeros((1, 3)), np.array([0.5]), "identity")])
        for x in ([0.0, 0.0, 0.0], [3.0, -1.0, 7.0]):
            assert np.array_equal(mathnn.mlp_forward(net, np.array(x)), [0.5])

    def test_two_layer_tanh_matches_manual_recurrence(self):
        net, rng = random_net(0, dims=(3, 5, 2), acts=("tanh", "tanh"))
        x = rng.standard_normal(3)
        # independent evaluation of the same recurrence
        h = x
        for layer in net.layers:
            h = np.tanh(layer.w @ h + layer.b)
        out = mathnn.mlp_forward(net, x)
        np.testing.assert_allclose(out, h, rtol=0, atol=1e-14)

    def test_forward_is_deterministic_bitwise(self):
        net, rng = random_net(1)
        x = rng.standard_normal((10, 4))
        a = mathnn.mlp_forward(net, x)
        b = mathnn.mlp_forward(net, x)
        assert np.array_equal(a, b)

    def test_dimension_mismatch_rejected(self):
        net, _ = random_net(2)
        with pytest.raises(ValueError):
            mathnn.mlp_forward(net, np.zeros(5))

    def test_batched_and_single_agree(self):
        # BLAS may pick different kernels for matrix vs vector products, so
        # agreement is to rounding, not bitwise
        net, rng = random_net(3)
        x = rng.standard_normal((4, 4))
        batched = mathnn.mlp_forward(net, x)
        for i in range(4):
            np.testing.assert_allclose(mathnn.mlp_forward(net, x[i]), batched[i],
                                       rtol=0, atol=1e-12)


class TestBackward:
    def test_identity_layer_gradients(self):
        net = MlpParams([Layer(np.zeros((1, 3)), np.zeros(1), "identity")])
        x = np.array([2.0, -1.0, 0.5])
        grads, gin = mathnn.mlp_backward(net, x, np.array([1.0]))
        np.testing.assert_array_equal(grads.layers[0].w, x[None, :])
        np.testing.assert_array_equal(grads.layers[0].b, [1.0])
        np.testing.assert_array_equal(gin, np.zeros(3))

    def test_zero_upstream_gives_zero_gradients(self):
        net, rng = random_net(4)
        x = rng.standard_normal(4)
        grads, gin = mathnn.mlp_backward(net, x, np.zeros(3))
        for leaf in mathnn.tree_leaves(grads):
            assert not leaf.any()
        assert not gin.any()

    @pytest.mark.parametrize("seed", range(5))
    def test_gradients_match_finite_differences(self, seed):
        net, rng = random_net(seed, dims=(4, 6, 5, 2),
                              acts=("elu", "softplus", "tanh"))
        x = rng.standard_normal((3, 4))
        w = rng.standard_normal((3, 2))

        def loss_and_grad(p):
            y = mathnn.mlp_forward(p, x)
            grads, _ = mathnn.mlp_backward(p, x, w)
            return float(np.sum(w * y)), grads

        err = mathnn.finite_diff_check(loss_and_grad, net, eps=1e-5)
        assert err < 1e-4

    def test_batch_size_mismatch_rejected(self):
        net, rng = random_net(5)
        with pytest.raises(ValueError):
            mathnn.mlp_backward(net, rng.standard_normal((2, 4)),
                                rng.standard_normal((3, 3)))


class TestAdam:
    def test_zero_gradient_keeps_parameters_increments_t(self):
        net, _ = random_net(6)
        state = mathnn.init_adam(net, lr=1e-3)
        before = [leaf.copy() for leaf in mathnn.tree_leaves(net)]
        new, state = mathnn.adam_step(net, mathnn.zeros_like_tree(net), state)
        assert state.t == 1
        for b, a in zip(before, mathnn.tree_leaves(new)):
            assert np.array_equal(b, a)

    def test_zero_gradient_is_identity_for_all_t(self):
        net, _ = random_net(7)
        state = mathnn.init_adam(net, lr=0.1)
        params = net
        for t in range(5):
            params, state = mathnn.adam_step(params, mathnn.zeros_like_tree(params), state)
        for b, a in zip(mathnn.tree_leaves(net), mathnn.tree_leaves(params)):
            assert np.array_equal(b, a)
        assert state.t == 5

    def test_first_step_magnitude_is_lr(self):
        p = np.array([1.0])
        state = mathnn.init_adam(p, lr=0.01)
        for g in (0.5, -3.0, 1e3):
            new, _ = mathnn.adam_step(p, np.array([g]), state)
            # bias-corrected m/sqrt(v) = sign(g) up to eps
            assert abs(abs(new[0] - p[0]) - 0.01) < 1e-6

    def test_two_steps_match_hand_rolled_recurrence(self):
        p = np.array([2.0])
        g = np.array([0.3])
        lr, b1, b2, eps = 1e-2, 0.9, 0.999, 1e-8
        state = mathnn.init_adam(p, lr=lr, beta1=b1, beta2=b2, eps=eps)
        out = p
        for _ in range(2):
            out, state = mathnn.adam_step(out, g, state)
        # direct recurrence
        m = v = 0.0
        x = 2.0
        for t in (1, 2):
            m = b1 * m + (1 - b1) * 0.3
            v = b2 * v + (1 - b2) * 0.3 ** 2
            mh = m / (1 - b1 ** t)
            vh = v / (1 - b2 ** t)
            x -= lr * mh / (np.sqrt(vh) + eps)
        np.testing.assert_allclose(out[0], x, rtol=0, atol=1e-15)

    def test_non_finite_gradient_rejected(self):
        net, _ = random_net(8)
        state = mathnn.init_adam(net)
        grads = mathnn.zeros_like_tree(net)
        grads.layers[0].w[0, 0] = np.nan
        with pytest.raises(ValueError):
            mathnn.adam_step(net, grads, state)

    def test_shape_mismatch_rejected(self):
        net, _ = random_net(9)
        state = mathnn.init_adam(net)
        grads = mathnn.zeros_like_tree(net)
        grads.layers[0] = Layer(np.zeros((2, 2)), np.zeros(2), grads.layers[0].act)
        with pytest.raises(ValueError):
            mathnn.adam_step(net, grads, state)


class TestFiniteDiffCheck:
    def test_quadratic_loss_is_exact(self):
        x = np.array([3.0])

        def loss_and_grad(p):
            return float(0.5 * p[0] ** 2), np.array([p[0]])

        assert mathnn.finite_diff_check(loss_and_grad, x, eps=1e-5) < 1e-9

    def test_corrupted_gradient_detected(self):
        net, rng = random_net(10)
        x = rng.standard_normal((3, 4))
        w = rng.standard_normal((3, 3))

        def loss_and_grad(p):
            y = mathnn.mlp_forward(p, x)
            grads, _ = mathnn.mlp_backward(p, x, w)
            grads.layers[0].w[0, 0] += 1.0   # injected fault
            return float(np.sum(w * y)), grads

        assert mathnn.finite_diff_check(loss_and_grad, net, eps=1e-5) > 1e-2

    def test_rejects_bad_eps(self):
        with pytest.raises(ValueError):
            mathnn.finite_diff_check(lambda p: (0.0, p), np.zeros(1), eps=0.0)

    def test_non_finite_loss_rejected(self):
        def loss_and_grad(p):
            return float("nan"), p

        with pytest.raises(ValueError):
            mathnn.finite_diff_check(loss_and_grad, np.ones(1))


class TestInit:
    def test_make_mlp_shapes_and_activations(self):
        rng = np.random.default_rng(0)
        net = mathnn.make_mlp(rng, [7, 5, 3], ["elu", "tanh"], out_gain=0.01)
        assert net.in_dim == 7 and net.out_dim == 3
        assert [l.act for l in net.layers] == ["elu", "tanh"]
        # scaled-down output layer
        assert np.abs(net.layers[-1].w).max() < 0.02
        net.validate()

    def test_validate_catches_chain_break(self):
        net = MlpParams([Layer(np.zeros((3, 2)), np.zeros(3), "elu"),
                         Layer(np.zeros((2, 4)), np.zeros(2), "identity")])
        with pytest.raises(ValueError):
            net.validate()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(0.1, 10.0))
def test_elu_softplus_forward_grad_consistent(seed, scale):
    # activation derivative-from-output identities hold on random data
    rng = np.random.default_rng(seed)
    z = scale * rng.standard_normal(50)
    for act in ("elu", "softplus", "tanh", "identity"):
        y = mathnn._act_forward(z, act)
        g = mathnn._act_grad_from_output(y, act)
        h = 1e-6
        numeric = (mathnn._act_forward(z + h, act) - mathnn._act_forward(z - h, act)) / (2 * h)
        np.testing.assert_allclose(g, numeric, atol=1e-6, rtol=1e-4)
