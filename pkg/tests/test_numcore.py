import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from issueframe import numcore as nc
from issueframe.errors import LabelError, NumericError, ShapeError, TapeStateError
from issueframe.numcore import Param, Tape


def fd_grad(f, x, h=1e-5):
    """Central differences of scalar ``f`` at every entry of ``x`` (independent of the tape)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


class TestAffine:
    @pytest.mark.parametrize("x, W, b, expected", [
        ([1, 2], [[1, 0], [0, 1]], [0, 0], [1, 2]),
        ([1, 1], [[2, 3]], [-5], [0]),
        ([0.5, -0.5], [[1, 1], [1, -1]], [1, 1], [1, 2]),
    ])
    def test_examples(self, x, W, b, expected):
        np.testing.assert_allclose(nc.affine(x, W, b).value, expected, atol=1e-15)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(3,\).*\(2, 2\)"):
            nc.affine([1, 2, 3], np.eye(2), [0, 0])

    def test_records_on_tape(self):
        tape = Tape()
        W = Param("W", np.eye(2))
        nc.affine(tape.constant([1.0, 2.0]), tape.param(W), tape.constant([0.0, 0.0]))
        assert len(tape) == 1

    def test_linear_map_gradient(self):
        x = np.array([0.3, -1.2, 2.0])
        W = Param("W", np.ones((2, 3)))
        tape = Tape()
        y = nc.affine(tape.constant(x), tape.param(W), tape.constant(np.zeros(2)))
        grads = tape.backward(y, np.array([1.0, 0.0]))
        expected = np.zeros((2, 3))
        expected[0] = x
        np.testing.assert_array_equal(grads["W"], expected)


class TestActivations:
    def test_sigmoid_examples(self):
        assert nc.sigmoid([0.0]).value[0] == 0.5
        assert abs(nc.sigmoid([1000.0]).value[0] - 1.0) <= 1e-12
        assert nc.sigmoid([-1000.0]).value[0] == 0.0

    def test_tanh_zero(self):
        assert nc.tanh([0.0]).value[0] == 0.0

    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=20))
    def test_ranges_and_finite(self, xs):
        s = nc.sigmoid(xs).value
        t = nc.tanh(xs).value
        assert np.all(np.isfinite(s)) and np.all((s >= 0) & (s <= 1))
        assert np.all(np.isfinite(t)) and np.all((t >= -1) & (t <= 1))

    def test_sigmoid_matches_definition(self):
        x = np.linspace(-30, 30, 101)
        np.testing.assert_allclose(nc.sigmoid(x).value, 1 / (1 + np.exp(-x)), rtol=1e-14, atol=1e-16)


class TestSoftmax:
    def test_examples(self):
        np.testing.assert_allclose(nc.softmax([0.0, 0.0]).value, [0.5, 0.5])
        np.testing.assert_allclose(nc.softmax([1000.0, 0.0]).value, [1.0, 0.0], atol=1e-12)
        z = np.log([1.0, 2.0, 3.0, 4.0])
        np.testing.assert_allclose(nc.softmax(z).value, [0.1, 0.2, 0.3, 0.4], atol=1e-15)

    def test_empty(self):
        with pytest.raises(ShapeError):
            nc.softmax(np.zeros(0))

    @given(st.lists(st.floats(-500, 500), min_size=1, max_size=12), st.floats(-1000, 1000))
    def test_sums_to_one_and_shift_invariant(self, z, c):
        z = np.array(z)
        p = nc.softmax(z).value
        assert abs(p.sum() - 1.0) <= 1e-9
        np.testing.assert_allclose(nc.softmax(z + c).value, p, atol=1e-9, rtol=0)


class TestCrossEntropy:
    def test_examples(self):
        assert nc.cross_entropy([1.0, 0.0, 0.0], 0).value == 0.0
        assert math.isclose(float(nc.cross_entropy([0.5, 0.5], 1).value), math.log(2), rel_tol=1e-15)
        assert math.isclose(float(nc.cross_entropy([0.1, 0.2, 0.7], 2).value), -math.log(0.7), rel_tol=1e-15)
        assert math.isclose(float(nc.cross_entropy([0.1, 0.2, 0.7], 2).value), 0.3567, abs_tol=1e-4)

    def test_clamped_zero_probability(self):
        assert float(nc.cross_entropy([1.0, 0.0], 1).value) == pytest.approx(-math.log(1e-12))

    def test_label_out_of_range(self):
        with pytest.raises(LabelError):
            nc.cross_entropy([0.5, 0.5], 2)
        with pytest.raises(LabelError):
            nc.cross_entropy([0.5, 0.5], -1)

    def test_softmax_ce_gradient_closed_form(self):
        tape = Tape()
        z = Param("z", [0.0, 0.0])
        loss = nc.cross_entropy(nc.softmax(tape.param(z)), 0)
        np.testing.assert_allclose(tape.backward(loss)["z"], [-0.5, 0.5], atol=1e-15)

    def test_fused_matches_composed(self):
        rng = nc.make_rng(3)
        z = rng.normal(size=(4, 5))
        y = np.array([0, 4, 2, 2])
        t1, t2 = Tape(), Tape()
        p1, p2 = Param("z", z), Param("z", z)
        l1 = nc.cross_entropy(nc.softmax(t1.param(p1)), y)
        l2, _ = nc.softmax_cross_entropy(t2.param(p2), y)
        assert float(l1.value) == pytest.approx(float(l2.value), rel=1e-14)
        np.testing.assert_allclose(t1.backward(l1)["z"], t2.backward(l2)["z"], atol=1e-15)


class TestBackward:
    def test_backward_without_forward(self):
        with pytest.raises(TapeStateError):
            Tape().backward(nc.Var(np.array(1.0)))

    def test_backward_twice(self):
        tape = Tape()
        p = Param("p", [1.0, 2.0])
        loss = nc.cross_entropy(nc.softmax(tape.param(p)), 0)
        tape.backward(loss)
        with pytest.raises(TapeStateError):
            tape.backward(loss)

    def test_frozen_params_get_no_gradient(self):
        tape = Tape()
        E = Param("E", np.eye(3), frozen=True)
        W = Param("W", np.ones((2, 3)))
        x = nc.gather_rows(tape.param(E), [1])
        loss, _ = nc.softmax_cross_entropy(nc.affine(x, tape.param(W), tape.constant(np.zeros(2))), np.array([0]))
        grads = tape.backward(loss)
        assert "E" not in grads and "W" in grads

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_random_affine_softmax_ce_matches_fd(self, seed):
        rng = nc.make_rng(seed)
        n_in, n_out, batch = (int(v) for v in rng.integers(1, 6, size=3))
        x = rng.normal(size=(batch, n_in))
        W = Param("W", rng.normal(size=(n_out, n_in)))
        b = Param("b", rng.normal(size=n_out))
        y = rng.integers(0, n_out, size=batch)

        def closure(tape):
            h = nc.tanh(nc.affine(tape.constant(x), tape.param(W), tape.param(b)))
            return nc.cross_entropy(nc.softmax(nc.sigmoid(h)), y)

        assert nc.grad_check(closure, [W, b], tolerance=1e-4).passed

    def test_tape_free_independent_oracle(self):
        rng = nc.make_rng(11)
        x = rng.normal(size=3)
        W0 = rng.normal(size=(4, 3))
        b = rng.normal(size=4)

        def loss_np(Wv):
            z = Wv @ x + b
            p = np.exp(z - z.max()) / np.exp(z - z.max()).sum()
            return -np.log(p[2])

        W = Param("W", W0)
        tape = Tape()
        loss, _ = nc.softmax_cross_entropy(nc.affine(tape.constant(x), tape.param(W), tape.constant(b)), 2)
        np.testing.assert_allclose(tape.backward(loss)["W"], fd_grad(loss_np, W0), rtol=1e-6, atol=1e-9)


class TestSgd:
    def test_plain_step(self):
        p = Param("p", [1.0])
        nc.sgd_step([p], {"p": np.array([1.0])}, lr=0.1, weight_decay=0.0)
        assert p.value[0] == pytest.approx(0.9, abs=1e-15)

    def test_decay_only(self):
        p = Param("p", [1.0])
        nc.sgd_step([p], {"p": np.array([0.0])}, lr=0.1, weight_decay=1e-7)
        assert p.value[0] == pytest.approx(1 - 1e-8, abs=1e-16)

    def test_frozen_untouched(self):
        E = Param("E", np.arange(6.0).reshape(2, 3), frozen=True)
        before = E.value.copy()
        nc.sgd_step([E], {"E": np.ones((2, 3))}, lr=0.5, weight_decay=0.1)
        np.testing.assert_array_equal(E.value, before)

    def test_non_finite_gradient_names_param(self):
        p = Param("enc.W", [1.0, 2.0])
        with pytest.raises(NumericError, match="enc.W"):
            nc.sgd_step([p], {"enc.W": np.array([np.nan, 0.0])}, lr=0.1)

    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8), st.floats(0, 1))
    def test_zero_lr_is_identity(self, values, wd):
        p = Param("p", values)
        before = p.value.copy()
        nc.sgd_step([p], {"p": np.ones_like(before)}, lr=0.0, weight_decay=wd)
        np.testing.assert_array_equal(p.value, before)


class TestRng:
    def test_same_seed_same_draws(self):
        a = nc.make_rng(42).random(100)
        b = nc.make_rng(42).random(100)
        assert a.tobytes() == b.tobytes()

    def test_streams_differ(self):
        assert nc.make_rng(1, 0).random() != nc.make_rng(1, 1).random()

    def test_frozen_reference_draws(self):
        # Philox + SeedSequence are specified by numpy; these values must not drift
        assert nc.make_rng(1).integers(0, 2**31, size=3).tolist() == FROZEN_DRAWS


# regression guard recorded on first run; catches generator or seeding changes
FROZEN_DRAWS = [903898909, 143456222, 373090239]


class TestGradCheck:
    def test_reversal_sign_flip(self):
        rng = nc.make_rng(5)
        x = rng.normal(size=(3, 4))
        W = Param("W", rng.normal(size=(2, 4)))
        D = Param("D", rng.normal(size=(2, 2)))
        y = np.array([0, 1, 1])

        def closure(tape):
            h = nc.tanh(nc.affine(tape.constant(x), tape.param(W), tape.constant(np.zeros(2))))
            z = nc.affine(nc.grad_reverse(h, 1.0), tape.param(D), tape.constant(np.zeros(2)))
            return nc.softmax_cross_entropy(z, y)[0]

        assert nc.grad_check(closure, [W], scale=-1.0).passed
        assert not nc.grad_check(closure, [W], scale=1.0).passed
        assert nc.grad_check(closure, [D], scale=1.0).passed

    def test_detects_wrong_gradient(self):
        p = Param("p", [0.3, -0.2])

        def closure(tape):
            v = tape.param(p)
            out = nc.Var(np.asarray((v.value ** 2).sum()), tape, requires_grad=True)

            def step():
                v.accumulate(3.0 * v.value * out.grad)  # wrong: should be 2x

            tape.record(step)
            return out

        report = nc.grad_check(closure, [p])
        assert not report.passed and report.max_rel_error > 0.1
