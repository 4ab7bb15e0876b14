import numpy as np
import pytest

from cu_lab import nets, tensor as tn
from cu_lab.errors import ConfigError, DimensionError
from cu_lab.tensor import Tensor
from oracles import gradient_check, jacobi_eigenvalues


def config(**kw):
    base = dict(m=4, t_minus=5, t_plus=4, hidden=8, layers=2, K=3, rank=4)
    base.update(kw)
    return nets.ModelConfig(**base)


def random_past(rng, c, batch=2):
    return rng.uniform(-10, 10, (batch, 2 * c.t_minus, c.m))


def permute_past(past, perm):
    return past[..., perm]


def zero_params(model, prefix):
    for name, p in model.params.items():
        if name.startswith(prefix):
            p.data = np.zeros_like(p.data)


class TestConfig:
    @pytest.mark.parametrize("kw", [{"tau": 0.0}, {"K": 0}, {"estimator": "x"}, {"interaction": "gnn"},
                                    {"activation": "gelu"}, {"phi_map": "square"}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            config(**kw)

    def test_round_trip_dict(self):
        c = config(estimator="cu-npe")
        assert nets.ModelConfig.from_dict(c.to_dict()) == c

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            nets.ModelConfig.from_dict({"widht": 3})


class TestEncoder:
    def test_separable_without_interaction(self):
        rng = np.random.default_rng(0)
        c = config()
        model = nets.Model(c)
        past = random_past(rng, c, 1)
        base = model.encode(past).data
        other = past.copy()
        other[..., 2] = 0.0
        changed = model.encode(other).data
        for i in (0, 1, 3):
            np.testing.assert_array_equal(base[0, i], changed[0, i])

    def test_attention_equivariance(self):
        rng = np.random.default_rng(1)
        c = config(interaction="attention")
        model = nets.Model(c)
        past = random_past(rng, c)
        perm = rng.permutation(c.m)
        a = model.encode(permute_past(past, perm)).data
        b = model.encode(past).data[:, perm]
        assert np.max(np.abs(a - b)) < 1e-9

    def test_single_agent_attention_is_residual_plus_value(self):
        rng = np.random.default_rng(2)
        with_att = nets.Model(config(m=1, interaction="attention"))
        without = nets.Model(config(m=1), {k: v for k, v in with_att.params.items() if not k.startswith("att")})
        past = random_past(rng, with_att.config)
        e = without.encode(past).data
        expect = e + e @ with_att.params["att.v"].data
        np.testing.assert_allclose(with_att.encode(past).data, expect, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            nets.Model(config()).encode(np.zeros((1, 7, 4)))


class TestHeads:
    rng = np.random.default_rng(3)

    def test_mean_equivariance_and_shape(self):
        c = config(K=1, interaction="attention")
        model = nets.Model(c)
        past = random_past(self.rng, c)
        perm = self.rng.permutation(c.m)
        out = model(past)
        assert out.means.shape == (2, 1, 2 * c.t_plus, c.m)
        permuted = model(permute_past(past, perm))
        assert np.max(np.abs(permuted.means.data - out.means.data[..., perm])) < 1e-9

    def test_zero_weight_mean_head(self):
        c = config()
        model = nets.Model(c)
        zero_params(model, "mean")
        assert np.all(model.predict_mean(model.encode(random_past(self.rng, c))).data == 0.0)

    def test_phi_scale_multiplies_phi_only(self):
        past = random_past(self.rng, config())
        base = nets.Model(config(positive_floor=0.0))(past)
        scaled = nets.Model(config(positive_floor=0.0, phi_scale=10.0))(past)
        np.testing.assert_allclose(scaled.phi.data, 10.0 * base.phi.data, rtol=1e-12)
        assert np.array_equal(scaled.sigma_inv.data, base.sigma_inv.data)
        with pytest.raises(ConfigError):
            config(phi_scale=0.0)

    @pytest.mark.parametrize("phi_map", ["softplus", "exp"])
    def test_phi_positive_and_equivariant(self, phi_map):
        c = config(phi_map=phi_map, interaction="attention")
        for seed in range(5):
            model = nets.Model(nets.ModelConfig(**{**c.to_dict(), "init_seed": seed}))
            past = random_past(self.rng, c)
            phi = model(past).phi.data
            assert phi.min() > 0
            perm = self.rng.permutation(c.m)
            assert np.max(np.abs(model(permute_past(past, perm)).phi.data - phi[..., perm])) < 1e-9

    def test_pe_theorems(self):
        c = config(interaction="attention", tau=0.01)
        model = nets.Model(c)
        past = random_past(self.rng, c)
        perm = self.rng.permutation(c.m)
        s = model(past).sigma_inv.data
        sp = model(permute_past(past, perm)).sigma_inv.data
        assert np.max(np.abs(sp - s[..., perm, :][..., perm])) < 1e-9
        for mat in s.reshape(-1, c.m, c.m):
            assert jacobi_eigenvalues(mat)[0] >= c.tau * (1 - 1e-9)
            np.testing.assert_allclose(mat, mat.T, atol=1e-12)

    def test_pe_zero_network_gives_tau_identity(self):
        c = config(tau=0.25)
        model = nets.Model(c)
        zero_params(model, "sig")
        s = model(random_past(self.rng, c)).sigma_inv.data
        np.testing.assert_array_equal(s, np.broadcast_to(0.25 * np.eye(c.m), s.shape))

    def test_ldl_known_case(self):
        s = nets.sigma_inv_ldl(Tensor(np.zeros((1, 1))), Tensor([[2.0, 3.0]]))
        np.testing.assert_array_equal(s.data[0], np.diag([2.0, 3.0]))

    def test_ldl_matches_explicit(self):
        lower = self.rng.standard_normal((1, 6))
        d = self.rng.uniform(0.5, 2, (1, 4))
        L = np.eye(4)
        L[np.tril_indices(4, -1)] = lower[0]
        expect = L @ np.diag(d[0]) @ L.T
        np.testing.assert_allclose(nets.sigma_inv_ldl(Tensor(lower), Tensor(d)).data[0], expect, atol=1e-12)

    def test_npe_positive_definite(self):
        model = nets.Model(config(estimator="cu-npe"))
        for mat in model(random_past(self.rng, model.config, 5)).sigma_inv.data.reshape(-1, 4, 4):
            assert jacobi_eigenvalues(mat)[0] > 0

    def test_npe_breaks_equivariance(self):
        c = config(estimator="cu-npe")
        model = nets.Model(c)
        past = random_past(self.rng, c)
        s = model(past).sigma_inv.data
        worst = 0.0
        for _ in range(20):
            perm = self.rng.permutation(c.m)
            sp = model(permute_past(past, perm)).sigma_inv.data
            worst = max(worst, np.max(np.abs(sp - s[..., perm, :][..., perm])))
        assert worst > 1e-3

    def test_iu_diagonal(self):
        model = nets.Model(config(estimator="iu-only"))
        s = model(random_past(self.rng, model.config)).sigma_inv.data
        off = s * (1 - np.eye(4))
        assert np.all(off == 0.0)
        assert np.all(np.diagonal(s, axis1=-2, axis2=-1) > 0)

    def test_iu_matches_pe_at_tau(self):
        tau = 0.7
        iu = nets.sigma_inv_diag(Tensor(np.full((2, 4), tau))).data
        pe = nets.sigma_inv_pe(Tensor(np.zeros((2, 4, 3))), tau).data
        np.testing.assert_array_equal(iu, pe)

    def test_detach_mean_blocks_gradient(self):
        c = config(detach_mean=True, K=1)
        model = nets.Model(c)
        out = model(random_past(self.rng, c))
        tn.backward(out.phi.sum() + out.sigma_inv.sum())
        assert all(model.params[k].grad is None for k in model.params if k.startswith("mean"))


class TestFullPipelineEquivariance:
    def test_outputs_permute_together(self):
        rng = np.random.default_rng(4)
        for m in (2, 3, 5):
            c = config(m=m, interaction="attention")
            model = nets.Model(c)
            past = random_past(rng, c)
            perm = rng.permutation(m)
            a, b = model(past), model(permute_past(past, perm))
            assert np.max(np.abs(b.means.data - a.means.data[..., perm])) < 1e-9
            assert np.max(np.abs(b.phi.data - a.phi.data[..., perm])) < 1e-9
            assert np.max(np.abs(b.sigma_inv.data - a.sigma_inv.data[..., perm, :][..., perm])) < 1e-9


class TestSelect:
    def test_lowest_phi(self):
        means = np.arange(3.0)[:, None, None] * np.ones((3, 2, 1))
        picked, k = nets.select(means, np.array([[3.0], [1.0], [2.0]]))
        assert k.tolist() == [1]
        np.testing.assert_array_equal(picked, np.ones((2, 1)))

    def test_tie_break_first(self):
        _, k = nets.select(np.zeros((3, 2, 2)), np.ones((3, 2)))
        assert k.tolist() == [0, 0]

    def test_monotone_invariance(self):
        rng = np.random.default_rng(5)
        means = rng.standard_normal((4, 3, 6, 5))
        phi = rng.uniform(0.1, 3, (4, 3, 5))
        _, k = nets.select(means, phi)
        for f in (lambda x: 3.0 * x, np.log, lambda x: x ** 3 + 1):
            assert np.array_equal(nets.select(means, f(phi))[1], k)

    def test_per_agent_assembly(self):
        means = np.stack([np.zeros((2, 2)), np.ones((2, 2))])
        picked, k = nets.select(means, np.array([[1.0, 5.0], [2.0, 0.5]]))
        assert k.tolist() == [0, 1]
        np.testing.assert_array_equal(picked, [[0.0, 1.0], [0.0, 1.0]])


class TestInitAndCheckpoint:
    def test_same_seed_same_params(self):
        a, b = nets.Model(config(init_seed=3)), nets.Model(config(init_seed=3))
        assert a.fingerprint() == b.fingerprint()
        assert a.fingerprint() != nets.Model(config(init_seed=4)).fingerprint()

    def test_checkpoint_round_trip(self, tmp_path):
        model = nets.Model(config(estimator="cu-npe", interaction="attention"))
        nets.save_checkpoint(model, tmp_path / "c.jsonl", {"step": 7})
        back, extra = nets.load_checkpoint(tmp_path / "c.jsonl")
        assert back.config == model.config and extra == {"step": 7}
        assert back.fingerprint() == model.fingerprint()


class TestGradients:
    """Network ops against finite differences on random configurations."""

    @pytest.mark.parametrize("seed", range(4))
    @pytest.mark.parametrize("estimator", nets.ESTIMATORS)
    def test_forward_gradient(self, seed, estimator):
        rng = np.random.default_rng(seed)
        c = config(m=3, t_minus=2, t_plus=2, hidden=4, K=2, rank=2, estimator=estimator,
                   interaction="attention" if seed % 2 else "none", init_seed=seed)
        model = nets.Model(c)
        past = random_past(rng, c, 2)
        names = sorted(model.params)

        def build(*arrays):
            m2 = nets.Model(c, {n: a for n, a in zip(names, arrays)})
            out = m2(past)
            probe = (out.means * Tensor(rng_probe(out.means.shape, 0))).sum()
            probe = probe + (out.phi * Tensor(rng_probe(out.phi.shape, 1))).sum()
            return probe + (out.sigma_inv * Tensor(rng_probe(out.sigma_inv.shape, 2))).sum()

        arrays = [model.params[n].data.copy() for n in names]
        assert gradient_check(build, arrays) < 1e-4


def rng_probe(shape, k):
    return np.random.default_rng(100 + k).standard_normal(shape)
