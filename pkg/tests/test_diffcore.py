import math

import numpy as np
import pytest

from ethkg import (
    diffcore as dc,
    diffgeometry as dg,
)
from ethkg.errors import (
    InvalidArgumentError,
    NumericError,
)
from ethkg.geometry import (
    exp_map_zero_array,
    log_map_zero_array,
    mobius_add_array,
    poincare_distance_array,
)
from tests.conftest import (
    assert_gradients_match,
    gradient_check,
)


def away_from_zero(rng, shape, low=0.2, high=1.5):
    """Values whose magnitude keeps central differences off the kinks"""
    return rng.uniform(low, high, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def ball_rows(rng, n, d, c, radius=0.7):
    x = rng.normal(size=(n, d))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    return x * rng.uniform(0.1, radius, size=(n, 1)) / np.sqrt(c)


class TestTape:
    """Tests for Tape, Node and backward"""

    def test_square_gradient(self):
        """Test d(x*x)/dx = 6 at x = 3"""
        tape = dc.Tape()
        x = tape.leaf(np.array(3.0), name="x")
        grads = dc.backward(tape, x * x)
        assert grads["x"] == pytest.approx(6.0)
        assert x.grad == pytest.approx(6.0)

    def test_non_scalar_root_rejected(self):
        """Test backward needs a scalar"""
        tape = dc.Tape()
        x = tape.leaf(np.ones((2, 2)))
        with pytest.raises(InvalidArgumentError):
            dc.backward(tape, dc.tanh(x))

    def test_unused_leaf_gets_zero_gradient(self):
        """Test leaves the root ignores receive zeros"""
        tape = dc.Tape()
        x = tape.leaf(np.array([1.0, 2.0]), name="x")
        y = tape.leaf(np.array([[1.0]]), name="y")
        grads = dc.backward(tape, dc.sum_all(dc.square(y)))
        assert np.array_equal(grads["x"], np.zeros(2))

    def test_constants_are_not_recorded(self):
        """Test operations on constants stay off the tape"""
        tape = dc.Tape()
        c = tape.constant(np.ones((2, 2)))
        dc.tanh(c)
        assert len(tape) == 0

    def test_non_finite_output_names_op(self):
        """Test NaN/Inf output raises NumericError naming the op"""
        tape = dc.Tape()
        x = tape.leaf(np.array([[-1.0]]))
        with pytest.raises(NumericError, match="divide"):
            dc.divide(x, tape.constant(np.zeros((1, 1))))

    def test_shape_mismatch(self):
        """Test elementwise ops insist on equal shapes"""
        tape = dc.Tape()
        with pytest.raises(InvalidArgumentError):
            dc.hadamard(tape.leaf(np.ones((2, 3))), tape.leaf(np.ones((3, 2))))

    def test_mixed_tapes_rejected(self):
        """Test nodes from two tapes cannot be combined"""
        a = dc.Tape().leaf(np.ones((1, 1)))
        b = dc.Tape().leaf(np.ones((1, 1)))
        with pytest.raises(InvalidArgumentError):
            dc.add(a, b)


class TestForwardValues:
    """Tests for forward definitions"""

    def test_layer_norm_example(self):
        """Test layer_norm([2, 4, 6]) = [-sqrt(3/2), 0, sqrt(3/2)]"""
        out = dc.layer_norm(dc.Tape().leaf(np.array([[2.0, 4.0, 6.0]])))
        expected = [-math.sqrt(1.5), 0.0, math.sqrt(1.5)]
        np.testing.assert_allclose(out.value[0], expected, rtol=1e-7)

    def test_layer_norm_statistics(self, rng):
        """Test rows come out with mean 0 and population std 1"""
        out = dc.layer_norm(dc.Tape().leaf(rng.normal(3.0, 5.0, size=(50, 16)))).value
        assert np.abs(out.mean(axis=1)).max() < 1e-9
        assert np.abs(out.std(axis=1) - 1.0).max() < 1e-6

    def test_layer_norm_constant_row(self):
        """Test a constant row maps to zeros without error"""
        out = dc.layer_norm(dc.Tape().leaf(np.full((1, 4), 2.5)))
        assert np.array_equal(out.value, np.zeros((1, 4)))

    def test_sigmoid_zero(self):
        """Test sigmoid(0) = 0.5"""
        assert dc.sigmoid(dc.Tape().leaf(np.zeros((1, 1)))).value[0, 0] == 0.5

    @pytest.mark.parametrize("training", [True, False])
    def test_rrelu_identity_on_nonnegatives(self, rng, training):
        """Test rrelu leaves x >= 0 unchanged in both modes"""
        x = np.abs(rng.normal(size=(4, 5)))
        slopes = np.random.default_rng(0)
        out = dc.rrelu(dc.Tape().leaf(x), 1 / 8, 1 / 3, training, slopes)
        assert np.array_equal(out.value, x)

    def test_rrelu_slopes(self, rng):
        """Test negative slopes are drawn in range when training, midpoint otherwise"""
        x = -np.ones((50, 50))
        train = dc.rrelu(dc.Tape().leaf(x), 1 / 8, 1 / 3, True, rng).value
        assert np.all(-train >= 1 / 8) and np.all(-train <= 1 / 3)
        assert len(np.unique(train)) > 1
        evaluation = dc.rrelu(dc.Tape().leaf(x), 1 / 8, 1 / 3, False).value
        np.testing.assert_allclose(evaluation, -(1 / 8 + 1 / 3) / 2)

    def test_rrelu_training_needs_rng(self):
        """Test training mode without a generator is an error"""
        with pytest.raises(InvalidArgumentError):
            dc.rrelu(dc.Tape().leaf(np.ones((1, 1))), 1 / 8, 1 / 3, True)

    def test_scatter_mean_rows(self):
        """Test rows are averaged per destination and empty rows stay zero"""
        x = np.array([[1.0, 2.0], [3.0, 4.0], [10.0, 10.0]])
        out = dc.scatter_mean_rows(dc.Tape().leaf(x), np.array([0, 0, 2]), 4).value
        expected = [[2.0, 3.0], [0.0, 0.0], [10.0, 10.0], [0.0, 0.0]]
        np.testing.assert_allclose(out, expected)

    def test_concat_rows(self):
        """Test row i of the output is [a_i; b_i]"""
        tape = dc.Tape()
        out = dc.concat_rows(tape.leaf(np.ones((2, 2))), tape.leaf(np.zeros((2, 1))))
        np.testing.assert_array_equal(out.value, [[1.0, 1.0, 0.0], [1.0, 1.0, 0.0]])

    def test_row_bias_add(self):
        """Test a 1-D bias is added to every row"""
        tape = dc.Tape()
        out = tape.leaf(np.zeros((3, 2))) + tape.leaf(np.array([1.0, 2.0]))
        np.testing.assert_array_equal(out.value, np.tile([1.0, 2.0], (3, 1)))

    def test_tanh_ratio_saturates(self):
        """Test tanh_ratio caps tanh at 1 - BALL_EPS"""
        out = dc.tanh_ratio(dc.Tape().leaf(np.array([[10.0]]))).value
        assert out[0, 0] * 10.0 == pytest.approx(1 - 1e-5)

    def test_broadcast_helpers(self):
        """Test column and row broadcasts go through ones vectors"""
        tape = dc.Tape()
        col = dc.broadcast_col(tape.leaf(np.array([[1.0], [2.0]])), 3)
        row = dc.broadcast_row(tape.leaf(np.array([[1.0, 2.0]])), 2)
        np.testing.assert_array_equal(col.value, [[1.0] * 3, [2.0] * 3])
        np.testing.assert_array_equal(row.value, [[1.0, 2.0], [1.0, 2.0]])


class TestGradients:
    """Finite-difference checks for every differentiable op"""

    @pytest.mark.parametrize(
        "name,build,shapes",
        [
            ("matmul", dc.matmul, [(3, 4), (4, 2)]),
            ("matmul3d", dc.matmul, [(2, 3, 4), (2, 4, 2)]),
            ("transpose", dc.transpose, [(3, 2)]),
            ("add", dc.add, [(3, 2), (3, 2)]),
            ("add_bias", dc.add, [(3, 2), (2,)]),
            ("sub", dc.sub, [(3, 2), (3, 2)]),
            ("hadamard", dc.hadamard, [(3, 2), (3, 2)]),
            ("concat_rows", dc.concat_rows, [(3, 2), (3, 4)]),
            ("mean_rows", dc.mean_rows, [(4, 3)]),
            ("row_sum", dc.row_sum, [(4, 3)]),
            ("sum_all", dc.sum_all, [(4, 3)]),
            ("mean_all", dc.mean_all, [(4, 3)]),
            ("scale_rows", dc.scale_rows, [(4, 3), (4, 1)]),
            ("square", dc.square, [(3, 3)]),
            ("tanh", dc.tanh, [(3, 3)]),
            ("sigmoid", dc.sigmoid, [(3, 3)]),
            ("softplus", dc.softplus, [(3, 3)]),
            ("relu", dc.relu, [(3, 3)]),
            ("layer_norm", dc.layer_norm, [(3, 5)]),
            ("sqrt_norm", dc.sqrt_norm, [(3, 5)]),
        ],
    )
    def test_op(self, rng, name, build, shapes):
        """Test analytic gradients against central differences"""
        inputs = [away_from_zero(rng, shape) for shape in shapes]
        assert_gradients_match(gradient_check(build, inputs))

    def test_divide(self, rng):
        """Test divide away from zero denominators"""
        inputs = [away_from_zero(rng, (3, 2)), away_from_zero(rng, (3, 2), 0.5, 2.0)]
        assert_gradients_match(gradient_check(dc.divide, inputs))

    def test_sqrt(self, rng):
        """Test sqrt on positive inputs"""
        assert_gradients_match(gradient_check(dc.sqrt, [rng.uniform(0.2, 3.0, (3, 3))]))

    def test_constant_ops(self, rng):
        """Test scale_by_constant, add_constant and clamp_min"""
        x = [away_from_zero(rng, (3, 4))]
        scaled = gradient_check(lambda a: dc.scale_by_constant(a, -2.5), x)
        assert_gradients_match(scaled)
        assert_gradients_match(gradient_check(lambda a: dc.add_constant(a, 0.7), x))
        assert_gradients_match(gradient_check(lambda a: dc.clamp_min(a, 0.05), x))

    def test_gather_and_scatter(self, rng):
        """Test gather_rows with repeats and scatter_mean_rows with empty rows"""
        index = np.array([0, 2, 2, 1, 0])
        x = [away_from_zero(rng, (3, 2))]
        assert_gradients_match(gradient_check(lambda a: dc.gather_rows(a, index), x))
        y = [away_from_zero(rng, (5, 2))]
        assert_gradients_match(
            gradient_check(lambda a: dc.scatter_mean_rows(a, index, 4), y)
        )

    def test_rrelu_reuses_slopes(self, rng):
        """Test rrelu backward uses the slopes drawn in forward"""
        x = [away_from_zero(rng, (4, 4))]
        pairs = gradient_check(
            lambda a: dc.rrelu(a, 1 / 8, 1 / 3, True, np.random.default_rng(5)), x
        )
        assert_gradients_match(pairs)

    def test_arctanh_clamped(self, rng):
        """Test arctanh inside (-1, 1)"""
        x = [rng.uniform(-0.9, 0.9, (3, 3))]
        assert_gradients_match(gradient_check(dc.arctanh_clamped, x))

    @pytest.mark.parametrize("low,high", [(1e-6, 5e-5), (0.01, 3.0), (7.0, 9.0)])
    def test_tanh_ratio(self, rng, low, high):
        """Test tanh_ratio in the series, regular and saturated regimes"""
        x = [away_from_zero(rng, (4, 1), low, high)]
        step = min(1e-6, low / 10)
        assert_gradients_match(gradient_check(dc.tanh_ratio, x, step=step))

    @pytest.mark.parametrize("low,high", [(1e-6, 5e-5), (0.01, 0.95)])
    def test_artanh_ratio(self, rng, low, high):
        """Test artanh_ratio in the series and regular regimes"""
        x = [away_from_zero(rng, (4, 1), low, high)]
        step = min(1e-6, low / 10)
        assert_gradients_match(gradient_check(dc.artanh_ratio, x, step=step))

    def test_softmax_cross_entropy(self, rng):
        """Test softmax cross-entropy gradient"""
        targets = np.array([0, 3, 1])
        x = [rng.normal(size=(3, 4))]
        check = gradient_check(lambda z: dc.softmax_cross_entropy(z, targets), x)
        assert_gradients_match(check)

    def test_binary_cross_entropy(self, rng):
        """Test binary cross-entropy gradient"""
        labels = (rng.uniform(size=(3, 4)) > 0.5).astype(float)
        x = [rng.normal(size=(3, 4))]
        assert_gradients_match(
            gradient_check(lambda z: dc.binary_cross_entropy_with_logits(z, labels), x)
        )


class TestLosses:
    """Tests for loss values"""

    def test_uniform_softmax(self):
        """Test uniform logits over 4 candidates give ln 4"""
        logits = dc.Tape().leaf(np.zeros((2, 4)))
        loss = dc.softmax_cross_entropy(logits, np.array([0, 3]))
        assert float(loss.value) == pytest.approx(math.log(4.0))

    def test_saturated_softmax(self):
        """Test a dominant gold logit drives the loss to ~0"""
        logits = np.zeros((1, 5))
        logits[0, 2] = 50.0
        loss = dc.softmax_cross_entropy(dc.Tape().leaf(logits), np.array([2]))
        assert float(loss.value) < 1e-20

    def test_hand_computed_softmax(self, rng):
        """Test the mean of -log softmax[gold] over two queries"""
        z = rng.normal(size=(2, 3))
        targets = np.array([2, 0])
        expected = -np.mean(
            [z[i, targets[i]] - math.log(np.exp(z[i]).sum()) for i in range(2)]
        )
        loss = dc.softmax_cross_entropy(dc.Tape().leaf(z), targets)
        assert float(loss.value) == pytest.approx(expected, rel=1e-12)

    def test_target_out_of_range(self):
        """Test a target beyond the candidate count is rejected"""
        with pytest.raises(InvalidArgumentError):
            dc.softmax_cross_entropy(dc.Tape().leaf(np.zeros((1, 3))), np.array([3]))


class TestDifferentiableGeometry:
    """Tests for the node versions of the ball operations"""

    def test_values_match_array_kernels(self, rng):
        """Test exp, log, Mobius addition and distance agree with the geometry module"""
        c = rng.uniform(0.2, 3.0, size=(6, 1))
        v = rng.normal(size=(6, 4))
        x = ball_rows(rng, 6, 4, c)
        y = ball_rows(rng, 6, 4, c)
        tape = dc.Tape()
        cn, vn, xn, yn = (tape.constant(a) for a in (c, v, x, y))
        np.testing.assert_allclose(
            dg.exp_map_zero(vn, cn).value, exp_map_zero_array(v, c), rtol=1e-10
        )
        np.testing.assert_allclose(
            dg.log_map_zero(xn, cn).value, log_map_zero_array(x, c), rtol=1e-10
        )
        np.testing.assert_allclose(
            dg.mobius_add(xn, yn, cn).value, mobius_add_array(x, y, c), rtol=1e-10
        )
        distances = dg.distance(xn, yn, cn).value[:, 0]
        np.testing.assert_allclose(
            distances, poincare_distance_array(x, y, c), rtol=1e-8
        )

    def test_pairwise_matches_brute_force(self, rng):
        """Test the closed-form pairwise distance against per-pair evaluation"""
        n, m, d = 5, 7, 3
        c = rng.uniform(0.2, 3.0, size=(n, 1))
        x = ball_rows(rng, n, d, c)
        g = rng.normal(size=(m, d))
        tape = dc.Tape()
        out = dg.pairwise_sq_distance(
            tape.constant(x), tape.constant(g), tape.constant(c)
        ).value
        for i in range(n):
            candidates = exp_map_zero_array(g, c[i, 0])
            queries = np.tile(x[i], (m, 1))
            expected = poincare_distance_array(queries, candidates, c[i, 0]) ** 2
            np.testing.assert_allclose(out[i], expected, rtol=1e-7)

    def test_distance_gradient(self, rng):
        """Test distance gradients with respect to both endpoints and curvature"""
        c = rng.uniform(0.5, 2.0, size=(4, 1))
        inputs = [ball_rows(rng, 4, 3, c), ball_rows(rng, 4, 3, c), c]
        assert_gradients_match(gradient_check(dg.distance, inputs))

    def test_exp_log_mobius_gradients(self, rng):
        """Test gradients of exp, log and Mobius addition"""
        c = rng.uniform(0.5, 2.0, size=(4, 1))
        v = rng.normal(size=(4, 3))
        x = ball_rows(rng, 4, 3, c)
        y = ball_rows(rng, 4, 3, c)
        assert_gradients_match(gradient_check(dg.exp_map_zero, [v, c]))
        assert_gradients_match(gradient_check(dg.log_map_zero, [x, c]))
        assert_gradients_match(gradient_check(dg.mobius_add, [x, y, c]))

    def test_pairwise_gradient(self, rng):
        """Test gradients of the pairwise distance in every argument"""
        c = rng.uniform(0.5, 2.0, size=(3, 1))
        inputs = [ball_rows(rng, 3, 4, c), rng.normal(size=(5, 4)), c]
        check = gradient_check(dg.pairwise_sq_distance, inputs)
        assert_gradients_match(check, rtol=1e-4, atol=1e-6)


class TestAdam:
    """Tests for adam_step"""

    def test_zero_gradient(self):
        """Test a zero gradient leaves parameters unchanged"""
        params = {"x": np.array([1.0, -2.0])}
        dc.adam_step(params, {"x": np.zeros(2)}, dc.AdamState())
        np.testing.assert_array_equal(params["x"], [1.0, -2.0])

    def test_first_step(self):
        """Test the first bias-corrected step moves by ~lr"""
        params = {"x": np.array([0.5])}
        dc.adam_step(params, {"x": np.array([1.0])}, dc.AdamState(), lr=0.001)
        assert params["x"][0] == pytest.approx(0.499, abs=1e-8)

    def test_converges_on_quadratic(self):
        """Test 1000 steps on x^2 from x=1 reach |x| < 0.1"""
        params = {"x": np.array([1.0])}
        state = dc.AdamState()
        for _ in range(1000):
            dc.adam_step(params, {"x": 2.0 * params["x"]}, state, lr=0.01)
        assert abs(params["x"][0]) < 0.1

    def test_shape_mismatch(self):
        """Test gradient and parameter shapes must agree"""
        with pytest.raises(InvalidArgumentError):
            dc.adam_step({"x": np.zeros(2)}, {"x": np.zeros(3)}, dc.AdamState())
