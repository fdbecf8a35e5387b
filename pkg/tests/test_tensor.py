import threading

import numpy as np
import pytest

from core import tensor as tc
from core.errors import BoundsError, ContractError, NumericError, ShapeError
from core.gradcheck import TOLERANCE, check_gradients, failed_checks, gradient_suite, relative_error
from core.layers import Dropout, Linear, Module, RngHolder
from core.tensor import Parameter, Tensor


class TestBackward:
    def test_broadcast_add_sums_gradient(self):
        a = Parameter(np.ones((3, 4)))
        row = Parameter(np.zeros((1, 4)))
        tc.backward(tc.sum(a + row))
        np.testing.assert_array_equal(a.grad, np.ones((3, 4)))
        np.testing.assert_array_equal(row.grad, np.full((1, 4), 3.0))

    def test_non_scalar_loss_rejected(self):
        x = Parameter(np.ones(3))
        with pytest.raises(ContractError):
            tc.backward(x * 2.0)

    def test_loss_without_grad_path_rejected(self):
        with pytest.raises(ContractError):
            tc.backward(tc.sum(Tensor(np.ones(3))))

    def test_leaf_gradients_accumulate(self):
        x = Parameter(np.array([1.0, 2.0]))
        loss = tc.sum(x * x)
        tc.backward(loss)
        tc.backward(loss)
        np.testing.assert_array_equal(x.grad, [4.0, 8.0])

    def test_intermediate_gradients_recomputed(self):
        x = Parameter(np.array([1.0, 2.0]))
        hidden = x * 3.0
        loss = tc.sum(hidden)
        tc.backward(loss)
        tc.backward(loss)
        np.testing.assert_array_equal(hidden.grad, [1.0, 1.0])

    def test_no_grad_stops_recording(self):
        x = Parameter(np.ones(2))
        with tc.no_grad():
            y = x * 2.0
        assert not y.requires_grad
        assert tc.is_grad_enabled()

    def test_tape_is_per_thread(self):
        seen = {}

        def worker():
            seen["enabled"] = tc.is_grad_enabled()
            seen["requires_grad"] = (Parameter(np.ones(2)) * 2.0).requires_grad

        with tc.no_grad():
            thread = threading.Thread(target=worker)
            thread.start()
            thread.join()
        assert seen == {"enabled": True, "requires_grad": True}


class TestShapesAndBounds:
    def test_matmul_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            tc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))

    @pytest.mark.parametrize("start,stop", [(-1, 2), (2, 2), (0, 5)])
    def test_slice_out_of_range(self, start, stop):
        with pytest.raises(BoundsError):
            tc.slice_along(Tensor(np.ones((4, 2))), 0, start, stop)

    def test_gather_rows_out_of_range(self):
        with pytest.raises(BoundsError):
            tc.gather_rows(Tensor(np.ones((3, 2))), [0, 3])

    def test_reshape_mismatch(self):
        with pytest.raises(ShapeError):
            tc.reshape(Tensor(np.ones((2, 3))), (4,))

    def test_concat_mismatch(self):
        with pytest.raises(ShapeError):
            tc.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4)))], axis=0)


class TestSoftmaxAndLoss:
    def test_masked_entries_get_exact_zero(self, rng):
        x = Tensor(rng.standard_normal((4, 5)))
        mask = rng.random((4, 5)) < 0.5
        mask[:, 2] = True
        out = tc.softmax(x, axis=1, mask=mask).data
        assert np.all(out[~mask] == 0.0)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)

    def test_empty_mask_slice_rejected(self):
        mask = np.array([[True, False], [False, False]])
        with pytest.raises(ContractError):
            tc.softmax(Tensor(np.zeros((2, 2))), axis=1, mask=mask)

    def test_bce_is_non_negative_and_vanishes_on_confident_targets(self):
        targets = np.array([[1.0, 0.0, 1.0]])
        assert tc.bce_with_logits(Tensor([[0.3, -2.0, 1.0]]), targets).item() >= 0.0
        assert tc.bce_with_logits(Tensor([[40.0, -40.0, 40.0]]), targets).item() < 1e-12

    def test_bce_shape_mismatch(self):
        with pytest.raises(ShapeError):
            tc.bce_with_logits(Tensor(np.zeros((2, 3))), np.zeros((3, 2)))

    def test_dropout_identity_outside_training(self, rng):
        x = Tensor(rng.standard_normal((3, 3)))
        assert tc.dropout(x, 0.5, rng, training=False) is x


class TestAdam:
    def test_missing_gradient_is_contract_error(self):
        p = Parameter(np.ones(2), name="w")
        with pytest.raises(ContractError, match="w"):
            tc.adam_step([p], lr=0.1)

    def test_non_finite_gradient_is_numeric_error(self):
        p = Parameter(np.ones(2), name="w")
        p.grad = np.array([np.nan, 1.0])
        with pytest.raises(NumericError):
            tc.adam_step([p], lr=0.1)

    def test_first_step_moves_against_gradient_by_lr(self):
        p = Parameter(np.array([1.0, -1.0]))
        p.grad = np.array([0.5, -2.0])
        tc.adam_step([p], lr=0.01)
        np.testing.assert_allclose(p.data, [0.99, -0.99], atol=1e-9)
        assert p.step == 1 and p.grad is None


class TestModule:
    def test_parameter_names_follow_attribute_paths(self, rng):
        class Pair(Module):
            def __init__(self):
                self.layers = [Linear(rng, 2, 3), Linear(rng, 3, 1, bias=False)]
                self.drop = Dropout(0.1, RngHolder(0))

        pair = Pair()
        pair.assign_names()
        names = [p.name for p in pair.parameters()]
        assert names == ["layers.0.weight", "layers.0.bias", "layers.1.weight"]

    def test_eval_propagates_to_children(self, rng):
        drop = Dropout(0.5, RngHolder(0))

        class Holder(Module):
            def __init__(self):
                self.inner = [drop]

        Holder().eval()
        assert drop.training is False


class TestGradientOracle:
    def test_relative_error_floor(self):
        assert relative_error(np.array([0.0]), np.array([1e-9]))[0] < 1e-2

    def test_detects_wrong_gradient(self):
        x = Parameter(np.array([0.3, -0.7]))

        def broken():
            out = tc._result(x.data ** 2, (x,), lambda grad: tc._accumulate(x, grad))
            return tc.sum(out)

        assert check_gradients(broken, [x]) > 0.1

    def test_every_operation_passes(self):
        report = gradient_suite(seeds=(0, 1), end_to_end=False)
        assert {"matmul", "softmax", "layer_norm", "graph_attention", "multi_head_attention"} <= set(report)
        assert failed_checks(report) == [], report

    def test_end_to_end_loss_passes(self):
        report = gradient_suite(seeds=(0,), end_to_end=True)
        assert report["end_to_end_loss"] < TOLERANCE


class TestOperationExamples:
    def test_softmax_of_large_scores_stays_finite(self):
        out = tc.softmax(Tensor([1000.0, 0.0])).data
        assert out[0] == 1.0 and 0.0 <= out[1] < 1e-300

    def test_softmax_of_equal_scores_is_uniform(self):
        np.testing.assert_allclose(tc.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)

    def test_layer_norm_of_constant_row(self):
        out = tc.layer_norm(Tensor([[2.0, 2.0, 2.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_layer_norm_of_symmetric_pair(self):
        out = tc.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
        np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-4)

    def test_leaky_relu_slope(self):
        np.testing.assert_array_equal(tc.leaky_relu(Tensor([-1.0, 0.0, 3.0])).data, [-0.2, 0.0, 3.0])

    def test_slice_recovers_concatenated_part(self):
        a, b = Tensor(np.ones((2, 3))), Tensor(np.zeros((3, 3)))
        np.testing.assert_array_equal(tc.slice_along(tc.concat([a, b]), 0, 0, 2).data, a.data)

    def test_detached_branch_gets_no_gradient(self):
        x = Parameter(np.array([1.0, 2.0]))
        tc.backward(tc.sum(tc.detach(x) * x))
        np.testing.assert_array_equal(x.grad, [1.0, 2.0])

    def test_adam_single_step_example(self):
        p = Parameter(np.array([0.0]))
        p.grad = np.array([1.0])
        tc.adam_step([p], lr=0.1)
        np.testing.assert_allclose(p.data, [-0.1], atol=1e-9)

    def test_adam_zero_gradient_keeps_parameter(self):
        p = Parameter(np.array([0.7]))
        p.grad = np.array([0.0])
        tc.adam_step([p], lr=0.1)
        np.testing.assert_array_equal(p.data, [0.7])

    def test_log_sigmoid_values_match_the_op_and_stay_finite(self):
        x = np.array([-1000.0, -2.0, 0.0, 3.0, 1000.0])
        values = tc.log_sigmoid_values(x)
        np.testing.assert_array_equal(values, tc.log_sigmoid(Tensor(x)).data)
        assert np.all(np.isfinite(values))
        assert values[2] == pytest.approx(np.log(0.5))
        assert values[0] == pytest.approx(-1000.0)
