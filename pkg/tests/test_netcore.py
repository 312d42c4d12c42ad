import math

import numpy as np
import pytest

from conftest import fd_gradient, rel_err
from loralab.errors import DataError, ShapeError, UsageError
from loralab.netcore import (
    AdamState,
    HeadBank,
    adam_step,
    ce_forward_backward,
    finite_diff_check,
    forward,
    make_backbone,
    pretrain_backbone,
)
from loralab.rng import RngStream


def _random_layers(stream, dims, activation="tanh"):
    layers = []
    for k, d in zip(dims[:-1], dims[1:]):
        layers.append((stream.normal((k, d)) * 0.5, stream.normal((1, d)) * 0.1, activation))
        stream = stream.spawn(1)
    return layers


class TestForwardBackward:
    def test_uniform_logits_loss_is_log_m(self):
        stream = RngStream(0)
        layers = _random_layers(stream, [4, 4])
        x = stream.spawn(9).normal((6, 4))
        for m in (2, 4, 7):
            res = ce_forward_backward(layers, np.zeros((4, m)), np.zeros((1, m)),
                                      x, np.zeros(6, dtype=int))
            assert abs(res.loss - math.log(m)) <= 1e-12

    def test_batch_permutation_invariance_bitwise(self):
        stream = RngStream(1)
        layers = _random_layers(stream, [5, 5, 5])
        x = stream.spawn(7).normal((8, 5))
        y = np.arange(8) % 3
        head_w, head_b = np.zeros((5, 3)), np.zeros((1, 3))
        base = ce_forward_backward(layers, head_w, head_b, x, y).loss
        perm = RngStream(2).permutation(8)
        permuted = ce_forward_backward(layers, head_w, head_b, x[perm], y[perm]).loss
        assert base == permuted

    @pytest.mark.parametrize("activation", ["tanh", "identity"])
    def test_all_gradients_match_fd(self, activation):
        stream = RngStream(3)
        layers = _random_layers(stream, [8, 8, 8], activation)
        x = stream.spawn(5).normal((4, 8))
        y = np.array([0, 2, 1, 2])
        head_w = stream.spawn(6).normal((8, 3)) * 0.3
        head_b = np.zeros((1, 3))

        def loss():
            return ce_forward_backward(layers, head_w, head_b, x, y).loss

        res = ce_forward_backward(layers, head_w, head_b, x, y)
        for i, (w, b, _) in enumerate(layers):
            assert rel_err(res.d_weights[i], fd_gradient(loss, w)) <= 1e-5
            assert rel_err(res.d_biases[i], fd_gradient(loss, b)) <= 1e-5
        assert rel_err(res.d_head_w, fd_gradient(loss, head_w)) <= 1e-5
        assert rel_err(res.d_head_b, fd_gradient(loss, head_b)) <= 1e-5

    def test_label_out_of_range(self):
        layers = _random_layers(RngStream(4), [3, 3])
        with pytest.raises(DataError):
            ce_forward_backward(layers, np.zeros((3, 2)), np.zeros((1, 2)),
                                np.ones((2, 3)), np.array([0, 2]))

    def test_empty_batch_rejected(self):
        layers = _random_layers(RngStream(4), [3, 3])
        with pytest.raises(DataError):
            ce_forward_backward(layers, np.zeros((3, 2)), np.zeros((1, 2)),
                                np.ones((0, 3)), np.array([], dtype=int))

    def test_dimension_mismatch(self):
        layers = _random_layers(RngStream(4), [3, 3])
        with pytest.raises(ShapeError):
            ce_forward_backward(layers, np.zeros((3, 2)), np.zeros((1, 2)),
                                np.ones((2, 4)), np.array([0, 1]))

    def test_head_only_when_no_layers(self):
        x = RngStream(5).normal((3, 4))
        res = ce_forward_backward([], np.zeros((4, 2)), np.zeros((1, 2)), x, np.array([0, 1, 0]))
        assert np.array_equal(res.features, x)


class TestAdam:
    def test_zero_gradient_fixed_point(self):
        p = np.array([[1.0, -2.0]])
        state = AdamState(lr=0.1)
        state.register("p", p)
        before = p.copy()
        adam_step(state, {"p": p}, {"p": np.zeros_like(p)})
        assert np.array_equal(p, before)

    def test_first_step_magnitude_is_lr(self):
        lr = 1e-3
        p = np.array([[0.0]])
        state = AdamState(lr=lr)
        state.register("p", p)
        adam_step(state, {"p": p}, {"p": np.array([[3.0]])})
        assert abs(abs(p[0, 0]) - lr) <= 1e-9
        assert p[0, 0] == -abs(p[0, 0])  # moves against the gradient sign

    def test_identical_runs_identical_bytes(self):
        def run():
            stream = RngStream(6)
            p = stream.normal((4, 4))
            state = AdamState(lr=0.01)
            state.register("p", p)
            for k in range(25):
                g = stream.spawn(k).normal((4, 4))
                adam_step(state, {"p": p}, {"p": g})
            return p.tobytes()

        assert run() == run()

    def test_shape_mismatch_rejected(self):
        p = np.zeros((2, 2))
        state = AdamState(lr=0.1)
        state.register("p", p)
        with pytest.raises(ShapeError):
            adam_step(state, {"p": p}, {"p": np.zeros((2, 3))})

    def test_unregistered_param_rejected(self):
        state = AdamState(lr=0.1)
        with pytest.raises(UsageError):
            adam_step(state, {"q": np.zeros(2)}, {"q": np.zeros(2)})

    def test_per_entry_learning_rates(self):
        p = np.zeros(3)
        state = AdamState(lr=1.0)
        state.register("p", p, lr=np.array([1e-2, 1e-3, 0.0]))
        adam_step(state, {"p": p}, {"p": np.ones(3)})
        assert abs(p[0] + 1e-2) < 1e-10
        assert abs(p[1] + 1e-3) < 1e-11
        assert p[2] == 0.0


class TestFiniteDiffCheck:
    def test_quadratic_exact(self):
        p = np.array([1.0, -2.0, 3.0])
        target = np.array([0.5, 0.5, 0.5])

        def closure():
            return float(((p - target) ** 2).sum()), {"p": 2.0 * (p - target)}

        report = finite_diff_check(closure, {"p": p}, step=1e-5, tol=1e-8)
        assert report.passed
        assert report.max_rel_error <= 1e-8

    def test_corrupted_gradient_reported(self):
        p = np.array([1.0, 2.0])

        def closure():
            return float((p**2).sum()), {"p": 4.0 * p}  # deliberately doubled

        report = finite_diff_check(closure, {"p": p}, step=1e-5, tol=1e-5)
        assert not report.passed
        assert report.failures() == ["p"]

    def test_step_must_be_positive(self):
        with pytest.raises(UsageError):
            finite_diff_check(lambda: (0.0, {}), {}, step=0.0, tol=1e-5)


class TestBackboneAndHeads:
    def test_make_backbone_orthogonal_init(self):
        bb = make_backbone(6, 3, "tanh", RngStream(7))
        assert bb.input_dim == 6 and bb.feature_dim == 6
        for blk in bb.blocks:
            assert np.abs(blk.weight.T @ blk.weight - np.eye(6)).max() < 1e-10
            assert np.array_equal(blk.bias, np.zeros((1, 6)))

    def test_unknown_activation(self):
        with pytest.raises(UsageError):
            make_backbone(4, 1, "relu6", RngStream(0))

    def test_head_bank_joint_roundtrip(self):
        bank = HeadBank()
        bank.add_head(1, [0, 1], 4)
        bank.add_head(2, [5, 6, 7], 4)
        w, b, classes = bank.joint()
        assert w.shape == (4, 5) and b.shape == (1, 5)
        assert classes.tolist() == [0, 1, 5, 6, 7]
        w2 = w + 1.0
        bank.set_joint(w2, b)
        assert np.array_equal(bank.head(2).w, w2[:, 2:])

    def test_duplicate_head_rejected(self):
        bank = HeadBank()
        bank.add_head(1, [0], 2)
        with pytest.raises(UsageError):
            bank.add_head(1, [1], 2)

    def test_pretraining_reduces_loss_and_trains_weights(self):
        stream = RngStream(8)
        bb = make_backbone(6, 2, "tanh", stream)
        w0 = bb.blocks[0].weight.copy()
        x = stream.spawn(1).normal((60, 6)) + np.repeat(np.eye(6)[:3] * 4.0, 20, axis=0)
        y = np.repeat(np.arange(3), 20)
        final = pretrain_backbone(bb, x, y, n_classes=3, epochs=8, batch_size=16,
                                  lr=0.02, rng=stream.spawn(2))
        assert final < math.log(3) * 0.5
        assert not np.array_equal(bb.blocks[0].weight, w0)
