"""Tape autodiff: forward examples, stop-gradient semantics, gradient checks."""

import math

import numpy as np
import pytest

from emalab import Tensor, Tape, op_backward, op_detach, op_forward, op_grad_check
from emalab.core import (
    add,
    add_bias,
    batch_norm,
    concat_rows,
    l2_normalize,
    matmul,
    neg_cosine_rowwise,
    relu,
    scale,
    soft_cross_entropy,
    softmax,
)
from emalab.errors import ContractError, DimensionError, NumericError

from oracles import fd_gradient, max_rel_err


def bn_train(x, gamma, beta, update_stats=False):
    n = x.shape[1]
    return batch_norm(
        x, gamma, beta,
        running_mean=np.zeros(n), running_var=np.ones(n),
        training=True, update_stats=update_stats,
    )


class TestForwardExamples:
    def test_softmax_symmetry(self):
        out = softmax(Tensor([0.0, 0.0]))
        np.testing.assert_array_equal(out.data, [0.5, 0.5])

    def test_relu_definition(self):
        out = relu(Tensor([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_l2_normalize_three_four_five(self):
        # Independent scalar arithmetic: hypotenuse of (3, 4) is 5.
        hyp = math.sqrt(3.0 * 3.0 + 4.0 * 4.0)
        out = l2_normalize(Tensor([3.0, 4.0]))
        np.testing.assert_allclose(out.data, [3.0 / hyp, 4.0 / hyp], rtol=0, atol=1e-15)
        assert out.data[0] == pytest.approx(0.6)
        assert out.data[1] == pytest.approx(0.8)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(7)
        x = Tensor(rng.uniform(-2, 2, size=(5, 9)))
        out = softmax(x)
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, rtol=0, atol=1e-12)

    def test_l2_rows_unit_norm(self):
        rng = np.random.default_rng(8)
        x = Tensor(rng.uniform(-2, 2, size=(6, 5)))
        out = l2_normalize(x)
        norms = np.sqrt((out.data ** 2).sum(axis=1))
        np.testing.assert_allclose(norms, 1.0, rtol=0, atol=1e-12)

    def test_batch_norm_standardizes_batch(self):
        rng = np.random.default_rng(9)
        x = Tensor(rng.normal(3.0, 2.5, size=(64, 4)))
        out = bn_train(x, Tensor(np.ones(4)), Tensor(np.zeros(4)))
        assert np.abs(out.data.mean(axis=0)).max() <= 1e-10
        np.testing.assert_allclose(out.data.var(axis=0), 1.0, rtol=0, atol=1e-4)

    def test_batch_norm_eval_uses_running_stats(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
        rm, rv = np.array([1.0, 1.0]), np.array([4.0, 4.0])
        out = batch_norm(
            x, Tensor(np.ones(2)), Tensor(np.zeros(2)),
            running_mean=rm, running_var=rv, training=False,
        )
        expected = (x.data - rm) / np.sqrt(rv + 1e-5)
        np.testing.assert_allclose(out.data, expected, rtol=0, atol=1e-14)

    def test_batch_norm_updates_running_stats(self):
        rng = np.random.default_rng(10)
        xv = rng.normal(2.0, 1.0, size=(32, 3))
        rm, rv = np.zeros(3), np.ones(3)
        bn_kwargs = dict(running_mean=rm, running_var=rv, training=True, update_stats=True)
        batch_norm(Tensor(xv), Tensor(np.ones(3)), Tensor(np.zeros(3)), **bn_kwargs)
        np.testing.assert_allclose(rm, 0.1 * xv.mean(axis=0), rtol=0, atol=1e-14)
        np.testing.assert_allclose(rv, 0.9 + 0.1 * xv.var(axis=0), rtol=0, atol=1e-14)

    def test_concat_rows_stacks(self):
        a, b = Tensor([[1.0, 2.0]]), Tensor([[3.0, 4.0], [5.0, 6.0]])
        out = concat_rows(a, b)
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4], [5, 6]])


class TestOpErrors:
    def test_matmul_shape_mismatch(self):
        with pytest.raises(DimensionError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_nonfinite_input_names_primitive(self):
        bad = Tensor(np.ones((2, 2)))
        bad.data[0, 0] = np.nan
        with pytest.raises(NumericError, match="relu"):
            relu(bad)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ContractError):
            op_forward("convolve", [Tensor([1.0])])

    def test_add_bias_width_mismatch(self):
        with pytest.raises(DimensionError):
            add_bias(Tensor(np.ones((2, 3))), Tensor(np.ones(4)))


class TestBackward:
    def test_linear_loss_gradient(self):
        # loss = sum(x * w) realized as a [1,1] matmul.
        with Tape() as tape:
            x = Tensor([[1.0, 2.0]])
            w = Tensor([[3.0], [4.0]], requires_grad=True)
            loss = matmul(x, w)
            gm = op_backward(tape, loss)
        np.testing.assert_array_equal(gm.get(w).data, [[1.0], [2.0]])

    def test_non_scalar_loss_rejected(self):
        with Tape() as tape:
            x = Tensor(np.ones((2, 2)), requires_grad=True)
            y = relu(x)
            with pytest.raises(ContractError):
                op_backward(tape, y)

    def test_loss_from_other_tape_rejected(self):
        with Tape():
            x = Tensor(np.ones((1, 1)), requires_grad=True)
            loss = scale(x, 2.0)
        with Tape() as other:
            with pytest.raises(ContractError):
                op_backward(other, loss)

    def test_intermediates_retained(self):
        with Tape() as tape:
            x = Tensor(np.ones((2, 2)), requires_grad=True)
            mid = relu(x)
            loss = neg_cosine_rowwise(mid, Tensor(np.ones((2, 2))))
            gm = op_backward(tape, loss)
        assert gm.get(mid) is not None
        assert gm.get(mid).shape == mid.shape

    def test_constant_inputs_absent(self):
        with Tape() as tape:
            x = Tensor(np.ones((2, 2)), requires_grad=True)
            c = Tensor(np.full((2, 2), 0.5))
            loss = neg_cosine_rowwise(x, c)
            gm = op_backward(tape, loss)
        assert gm.get(c) is None
        assert gm.get(x) is not None

    def test_gradient_accumulates_over_reuse(self):
        # y used twice: gradients from both paths must add.
        with Tape() as tape:
            w = Tensor([[2.0]], requires_grad=True)
            y1 = scale(w, 3.0)
            y2 = scale(w, 5.0)
            loss = add(y1, y2)
            gm = op_backward(tape, loss)
        np.testing.assert_array_equal(gm.get(w).data, [[8.0]])

    def test_batch_norm_matmul_matches_fd_oracle(self):
        rng = np.random.default_rng(42)
        x0 = rng.uniform(-2, 2, size=(4, 3))
        wv = rng.uniform(-1, 1, size=(3, 3))
        gv = rng.uniform(0.5, 1.5, size=3)
        bv = rng.uniform(-0.5, 0.5, size=3)
        reducer = rng.uniform(-1, 1, size=(3, 1))
        lead = rng.uniform(-1, 1, size=(1, 4))

        def forward(xdata):
            h = bn_train(matmul(Tensor(xdata), Tensor(wv)), Tensor(gv), Tensor(bv))
            return matmul(matmul(Tensor(lead), h), Tensor(reducer)).item()

        with Tape() as tape:
            x = Tensor(x0, requires_grad=True)
            h = bn_train(matmul(x, Tensor(wv)), Tensor(gv), Tensor(bv))
            loss = matmul(matmul(Tensor(lead), h), Tensor(reducer))
            gm = op_backward(tape, loss)

        numeric = fd_gradient(forward, x0, h=1e-5)
        assert max_rel_err(gm.get(x).data, numeric) <= 1e-6

    def test_tape_is_step_scoped(self):
        w = Tensor([[1.0]], requires_grad=True)
        with Tape() as t1:
            loss = scale(w, 2.0)
            gm1 = op_backward(t1, loss)
        assert gm1.get(w) is not None
        with Tape() as t2:
            loss2 = scale(w, 4.0)
            gm2 = op_backward(t2, loss2)
        np.testing.assert_array_equal(gm2.get(w).data, [[4.0]])
        # The stale GradMap no longer resolves the re-registered leaf.
        assert len(t2.nodes) == 2


class TestDetach:
    def test_detach_flags_and_values(self):
        t = Tensor(np.arange(6, dtype=float).reshape(2, 3), requires_grad=True)
        d = op_detach(t)
        assert d.requires_grad is False
        np.testing.assert_array_equal(d.data, t.data)

    def test_detached_target_gets_no_gradient(self):
        rng = np.random.default_rng(3)
        with Tape() as tape:
            p = Tensor(rng.uniform(-1, 1, size=(3, 4)), requires_grad=True)
            z = Tensor(rng.uniform(-1, 1, size=(3, 4)), requires_grad=True)
            loss = neg_cosine_rowwise(p, op_detach(z))
            gm = op_backward(tape, loss)
        assert gm.get(p) is not None
        assert gm.get(z) is None

    def test_detach_blocks_ancestors(self):
        with Tape() as tape:
            x = Tensor(np.ones((2, 2)), requires_grad=True)
            mid = relu(x)
            cut = op_detach(mid)
            loss = neg_cosine_rowwise(cut, Tensor(np.ones((2, 2))))
            # The detached branch contributes no gradient anywhere.
            with pytest.raises(ContractError):
                op_backward(tape, loss)

    def test_detach_branch_absent_when_other_path_exists(self):
        with Tape() as tape:
            x = Tensor(np.ones((2, 2)), requires_grad=True)
            mid = relu(x)
            live = scale(mid, 1.0)
            loss = neg_cosine_rowwise(live, op_detach(mid))
            gm = op_backward(tape, loss)
        assert gm.get(x) is not None


class TestOpGradCheck:
    def test_matmul_chain(self):
        rng = np.random.default_rng(11)
        b = Tensor(rng.uniform(-1, 1, size=(2, 4)))
        lead = Tensor(rng.uniform(-1, 1, size=(1, 3)))
        red = Tensor(rng.uniform(-1, 1, size=(4, 1)))
        x = Tensor(rng.uniform(-2, 2, size=(3, 2)))
        err = op_grad_check(lambda t: matmul(matmul(lead, matmul(t, b)), red), x)
        assert err <= 1e-6

    def test_soft_cross_entropy_two_classes(self):
        rng = np.random.default_rng(12)
        targets = Tensor(np.array([[0.3, 0.7], [0.9, 0.1]]))
        x = Tensor(rng.uniform(-2, 2, size=(2, 2)))
        err = op_grad_check(lambda t: soft_cross_entropy(t, targets), x)
        assert err <= 1e-6

    def test_l2_normalize_near_zero_uses_eps_branch(self):
        tiny = Tensor(np.full((1, 3), 1e-13))
        red = Tensor(np.ones((3, 1)))
        lead = Tensor(np.ones((1, 1)))
        err = op_grad_check(lambda t: matmul(lead, matmul(l2_normalize(t), red)), tiny)
        assert math.isfinite(err)

    def test_bad_step_size_rejected(self):
        with pytest.raises(ContractError):
            op_grad_check(lambda t: t, Tensor([1.0]), h=0.0)


def _scalarize(x, lead, red):
    return matmul(matmul(lead, x), red)


CHAIN_CASES = [
    "matmul_lhs", "matmul_rhs", "add_bias_x", "add_bias_b", "add_lhs",
    "relu", "batch_norm_x", "batch_norm_gamma", "batch_norm_beta",
    "l2_normalize", "softmax", "concat_a", "concat_b", "scale",
    "neg_cosine_p", "neg_cosine_z", "soft_ce_logits", "soft_ce_targets",
]


def build_chain(name, rng):
    """Return (chain, input_tensor) with constants closed over."""
    m, n = 3, 4
    lead = Tensor(rng.uniform(-1, 1, size=(1, m)))
    red = Tensor(rng.uniform(-1, 1, size=(n, 1)))
    mat = rng.uniform(-2, 2, size=(m, n))
    mat += np.sign(mat) * 0.05  # keep relu inputs away from the kink
    other = Tensor(rng.uniform(-2, 2, size=(m, n)))

    if name == "matmul_lhs":
        b = Tensor(rng.uniform(-1, 1, size=(2, n)))
        return lambda t: _scalarize(matmul(t, b), lead, red), Tensor(rng.uniform(-2, 2, size=(m, 2)))
    if name == "matmul_rhs":
        a = Tensor(rng.uniform(-1, 1, size=(m, 2)))
        return lambda t: _scalarize(matmul(a, t), lead, red), Tensor(rng.uniform(-2, 2, size=(2, n)))
    if name == "add_bias_x":
        bias = Tensor(rng.uniform(-1, 1, size=n))
        return lambda t: _scalarize(add_bias(t, bias), lead, red), Tensor(mat)
    if name == "add_bias_b":
        return lambda t: _scalarize(add_bias(other, t), lead, red), Tensor(rng.uniform(-1, 1, size=n))
    if name == "add_lhs":
        return lambda t: _scalarize(add(t, other), lead, red), Tensor(mat)
    if name == "relu":
        return lambda t: _scalarize(relu(t), lead, red), Tensor(mat)
    if name == "batch_norm_x":
        g = Tensor(rng.uniform(0.5, 1.5, size=n))
        bt = Tensor(rng.uniform(-0.5, 0.5, size=n))
        return lambda t: _scalarize(bn_train(t, g, bt), lead, red), Tensor(rng.uniform(-2, 2, size=(m, n)))
    if name == "batch_norm_gamma":
        bt = Tensor(rng.uniform(-0.5, 0.5, size=n))
        return lambda t: _scalarize(bn_train(other, t, bt), lead, red), Tensor(rng.uniform(0.5, 1.5, size=n))
    if name == "batch_norm_beta":
        g = Tensor(rng.uniform(0.5, 1.5, size=n))
        return lambda t: _scalarize(bn_train(other, g, t), lead, red), Tensor(rng.uniform(-0.5, 0.5, size=n))
    if name == "l2_normalize":
        return lambda t: _scalarize(l2_normalize(t), lead, red), Tensor(mat)
    if name == "softmax":
        return lambda t: _scalarize(softmax(t), lead, red), Tensor(mat)
    if name == "concat_a":
        tail = Tensor(rng.uniform(-1, 1, size=(1, n)))
        lead4 = Tensor(rng.uniform(-1, 1, size=(1, m + 1)))
        return lambda t: _scalarize(concat_rows(t, tail), lead4, red), Tensor(mat)
    if name == "concat_b":
        head = Tensor(rng.uniform(-1, 1, size=(1, n)))
        lead4 = Tensor(rng.uniform(-1, 1, size=(1, m + 1)))
        return lambda t: _scalarize(concat_rows(head, t), lead4, red), Tensor(mat)
    if name == "scale":
        return lambda t: _scalarize(scale(t, 1.7), lead, red), Tensor(mat)
    if name == "neg_cosine_p":
        return lambda t: neg_cosine_rowwise(t, other), Tensor(mat)
    if name == "neg_cosine_z":
        return lambda t: neg_cosine_rowwise(other, t), Tensor(mat)
    if name == "soft_ce_logits":
        probs = Tensor(rng.uniform(0.05, 1.0, size=(m, n)))
        return lambda t: soft_cross_entropy(t, probs), Tensor(mat)
    if name == "soft_ce_targets":
        return lambda t: soft_cross_entropy(other, t), Tensor(rng.uniform(0.05, 1.0, size=(m, n)))
    raise AssertionError(name)


class TestPrimitiveGradients:
    @pytest.mark.parametrize("name", CHAIN_CASES)
    def test_matches_central_differences(self, name):
        for seed in range(5):
            rng = np.random.default_rng(1000 + seed)
            chain, inp = build_chain(name, rng)
            assert op_grad_check(chain, inp, h=1e-5) <= 1e-6, f"{name} seed {seed}"
