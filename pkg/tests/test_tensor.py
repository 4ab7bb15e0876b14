import numpy as np
import pytest

from cu_lab import tensor as tn
from cu_lab.errors import ContractError, DefinitenessError, DimensionError, DomainError, NumericError
from cu_lab.tensor import Tensor
from oracles import gradient_check, matmul_loops


class TestTensorBasics:
    def test_rejects_non_finite(self):
        with pytest.raises(DomainError):
            Tensor([1.0, np.nan])
        with pytest.raises(DomainError):
            Tensor([np.inf])

    def test_shape_and_size(self):
        t = Tensor(np.zeros((2, 3)))
        assert t.shape == (2, 3) and t.size == 6 and t.data.dtype == np.float64

    def test_debug_flags_non_finite_outputs(self):
        tn.set_debug(True)
        try:
            with pytest.raises(NumericError):
                tn.exp(Tensor([1000.0]))
        finally:
            tn.set_debug(False)

    def test_graph_parents_precede_children(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = tn.exp(x) * x
        loss = y.sum()
        order = tn.graph(loss)
        pos = {t.node_id: i for i, t in enumerate(order)}
        for t in order:
            for p in t.parents:
                assert pos[p.node_id] < pos[t.node_id]


class TestMatmul:
    def test_identity(self):
        b = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(tn.matmul(Tensor(np.eye(2)), Tensor(b)).data, b)

    def test_projector(self):
        out = tn.matmul(Tensor([[1.0, 0.0], [0.0, 0.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
        np.testing.assert_array_equal(out.data, [[5.0, 6.0], [0.0, 0.0]])

    def test_triple_loop_oracle(self):
        rng = np.random.default_rng(0)
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
        np.testing.assert_allclose(tn.matmul(Tensor(a), Tensor(b)).data, matmul_loops(a, b), atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            tn.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_associativity(self):
        rng = np.random.default_rng(1)
        a, b, c = (Tensor(rng.standard_normal((4, 4))) for _ in range(3))
        np.testing.assert_allclose(((a @ b) @ c).data, (a @ (b @ c)).data, atol=1e-10)

    def test_batched(self):
        rng = np.random.default_rng(2)
        a, b = rng.standard_normal((3, 2, 4)), rng.standard_normal((3, 4, 5))
        np.testing.assert_allclose(tn.matmul(Tensor(a), Tensor(b)).data, a @ b, atol=1e-12)


class TestElementwise:
    def test_exp(self):
        np.testing.assert_allclose(tn.elementwise("exp", Tensor([0.0, 1.0])).data, [1.0, np.e])

    def test_log_exp_inverse(self):
        x = np.array([0.5, 2.0])
        np.testing.assert_allclose(tn.log(tn.exp(Tensor(x))).data, x, atol=1e-12)

    def test_relu(self):
        np.testing.assert_array_equal(tn.elementwise("relu", Tensor([-1.0, 2.0])).data, [0.0, 2.0])

    @pytest.mark.parametrize("op,val", [("log", 0.0), ("log", -1.0), ("sqrt", 0.0), ("sqrt", -2.0)])
    def test_domain_errors(self, op, val):
        with pytest.raises(DomainError):
            tn.elementwise(op, Tensor([1.0, val]))

    def test_division_by_zero(self):
        with pytest.raises(DomainError):
            tn.div(Tensor([1.0]), Tensor([0.0]))

    def test_only_scalar_broadcasting(self):
        with pytest.raises(DimensionError):
            tn.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))
        assert tn.add(Tensor(np.ones((2, 3))), 1.0).shape == (2, 3)

    def test_unknown_tag(self):
        with pytest.raises(ContractError):
            tn.elementwise("cosh", Tensor([1.0]))


class TestReduce:
    def test_sum(self):
        assert tn.reduce("sum", Tensor([1.0, 2.0, 3.0])).item() == 6.0

    def test_mean_axis(self):
        np.testing.assert_array_equal(tn.reduce("mean", Tensor([[1.0, 3.0], [3.0, 5.0]]), 0).data, [2.0, 4.0])

    def test_max_tie_break_first_index(self):
        x = Tensor([2.0, 2.0, 1.0], requires_grad=True)
        out = tn.reduce("max", x)
        assert out.item() == 2.0
        tn.backward(out)
        np.testing.assert_array_equal(x.grad, [1.0, 0.0, 0.0])

    def test_max_axis_tie_break(self):
        x = Tensor([[1.0, 1.0], [0.0, 3.0]], requires_grad=True)
        tn.backward(tn.reduce_max(x, axis=1).sum())
        np.testing.assert_array_equal(x.grad, [[1.0, 0.0], [0.0, 1.0]])

    def test_empty_axis(self):
        with pytest.raises(DomainError):
            tn.reduce("sum", Tensor(np.zeros((0, 3))), 0)

    def test_axis_out_of_range(self):
        with pytest.raises(DimensionError):
            tn.reduce("sum", Tensor(np.zeros(3)), 1)


class TestBackward:
    def test_quadratic(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        tn.backward((x * x).sum())
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_constant_loss_gives_zero_grads(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        tn.backward((x * 0.0).sum() + 3.0)
        np.testing.assert_array_equal(x.grad, [0.0, 0.0])

    def test_non_scalar_loss(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ContractError):
            tn.backward(x * 2.0)

    def test_accumulates(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        tn.backward((x * x).sum())
        tn.backward((x * x).sum())
        np.testing.assert_array_equal(x.grad, [4.0, 8.0])

    def test_linearity(self):
        rng = np.random.default_rng(3)
        data = rng.standard_normal(5)

        def grads(fn):
            x = Tensor(data, requires_grad=True)
            tn.backward(fn(x))
            return x.grad

        f = lambda x: (tn.tanh(x) * x).sum()
        g = lambda x: tn.exp(x).mean()
        np.testing.assert_allclose(grads(lambda x: f(x) + g(x)), grads(f) + grads(g), atol=1e-12)

    def test_nll_like_expression_against_finite_differences(self):
        rng = np.random.default_rng(4)
        r = rng.standard_normal(4)
        # 1/2 [q / phi + m log phi] with q = |r|^2
        build = lambda r, phi: 0.5 * ((r * r).sum() / phi + 4.0 * tn.log(phi))
        assert gradient_check(build, [r, np.array(0.7)]) < 1e-4


def _unary(op):
    return lambda a: (op(a) * op(a)).sum()


class TestPrimitiveGradients:
    """Every primitive against central finite differences on [-2, 2]
    (log/sqrt on [0.1, 2])."""

    rng = np.random.default_rng(5)

    @pytest.mark.parametrize("name", ["exp", "neg", "relu", "tanh", "softplus", "absolute"])
    def test_unary(self, name):
        x = self.rng.uniform(-2, 2, (3, 4))
        x[np.abs(x) < 1e-3] = 0.5  # keep away from kinks
        assert gradient_check(_unary(getattr(tn, name)), [x]) < 1e-4

    @pytest.mark.parametrize("name", ["log", "sqrt"])
    def test_restricted_domain(self, name):
        x = self.rng.uniform(0.1, 2, (3, 4))
        assert gradient_check(_unary(getattr(tn, name)), [x]) < 1e-4

    @pytest.mark.parametrize("name", ["add", "sub", "mul", "div"])
    def test_binary(self, name):
        a = self.rng.uniform(-2, 2, (2, 3))
        b = self.rng.uniform(0.5, 2, (2, 3))
        op = getattr(tn, name)
        assert gradient_check(lambda a, b: (op(a, b) * op(a, b)).sum(), [a, b]) < 1e-4

    def test_scalar_broadcast(self):
        a = self.rng.uniform(-2, 2, (2, 3))
        s = np.array(0.8)
        assert gradient_check(lambda a, s: (tn.mul(a, s) * tn.div(a, s)).sum(), [a, s]) < 1e-4

    def test_matmul(self):
        a, b = self.rng.uniform(-2, 2, (3, 4)), self.rng.uniform(-2, 2, (4, 2))
        assert gradient_check(lambda a, b: (tn.matmul(a, b) * tn.matmul(a, b)).sum(), [a, b]) < 1e-4

    def test_batched_matmul_transpose(self):
        a = self.rng.uniform(-2, 2, (2, 3, 4))
        assert gradient_check(lambda a: (tn.matmul(a, tn.transpose(a)) * tn.matmul(a, tn.transpose(a))).sum(), [a]) < 1e-4

    @pytest.mark.parametrize("tag,axis", [("sum", None), ("sum", 1), ("mean", 0), ("max", None), ("max", 1)])
    def test_reductions(self, tag, axis):
        x = self.rng.uniform(-2, 2, (3, 4))
        assert gradient_check(lambda x: (tn.reduce(tag, x, axis) * tn.reduce(tag, x, axis)).sum(), [x]) < 1e-4

    def test_shape_ops(self):
        x = self.rng.uniform(-2, 2, (2, 3))
        w = self.rng.uniform(-2, 2, (3, 2, 6))

        def build(x):
            b = tn.broadcast_to(x.reshape(1, 2, 3), (3, 2, 3))
            c = tn.concat([b, b * b], axis=2) * tn.Tensor(w)
            d = tn.transpose(c, (2, 0, 1))[1:4]
            return (tn.softmax(d, axis=1) * d).sum() + tn.index(x, (np.array([0, 0, 1]), np.array([2, 2, 0]))).sum()

        assert gradient_check(build, [x]) < 1e-4

    def test_diagonal_and_logdet(self):
        # logdet reads only the lower triangle, so differentiate through a
        # symmetric parameterisation A A^T + I
        a = self.rng.uniform(-1, 1, (2, 3, 3))

        def build(a):
            s = tn.matmul(a, tn.transpose(a)) + tn.Tensor(np.broadcast_to(np.eye(3), (2, 3, 3)))
            return (tn.logdet(s) * tn.logdet(s)).sum() + (tn.diagonal(s) * tn.diagonal(s)).sum()

        assert gradient_check(build, [a]) < 1e-4


class TestLogdet:
    def test_value(self):
        assert tn.logdet(Tensor([[2.0, 1.0], [1.0, 2.0]])).item() == pytest.approx(np.log(3.0), abs=1e-14)

    def test_not_pd(self):
        with pytest.raises(DefinitenessError):
            tn.logdet(Tensor([[1.0, 2.0], [2.0, 1.0]]))


class TestSgd:
    def test_step(self):
        p = Tensor([1.0], requires_grad=True)
        p.grad = np.array([2.0])
        tn.sgd_step([p], 0.1)
        np.testing.assert_allclose(p.data, [0.8])

    def test_clip(self):
        p = Tensor([0.0], requires_grad=True)
        p.grad = np.array([10.0])
        norm = tn.sgd_step([p], 1.0, grad_clip=1.0)
        assert norm == 10.0
        np.testing.assert_allclose(p.data, [-1.0])

    def test_missing_grad(self):
        with pytest.raises(ContractError):
            tn.sgd_step([Tensor([1.0], requires_grad=True)], 0.1)

    def test_zero_lr_leaves_params(self):
        p = Tensor([1.5], requires_grad=True)
        p.grad = np.array([3.0])
        tn.sgd_step([p], 0.0)
        assert p.data[0] == 1.5

    def test_rerun_determinism(self):
        def run():
            rng = np.random.default_rng(11)
            w = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
            x = rng.standard_normal((8, 3))
            y = rng.standard_normal((8, 2))
            for _ in range(100):
                tn.zero_grad([w])
                r = tn.matmul(Tensor(x), w) - Tensor(y)
                tn.backward((tn.tanh(r) * r).mean())
                tn.sgd_step([w], 0.05, grad_clip=1.0)
            return w.data.tobytes()

        assert run() == run()

    def test_adam_decreases_quadratic(self):
        p = Tensor([3.0, -2.0], requires_grad=True)
        opt = tn.Adam([p], lr=0.1)
        for _ in range(200):
            tn.zero_grad([p])
            tn.backward((p * p).sum())
            opt.step()
        assert np.all(np.abs(p.data) < 0.1)
