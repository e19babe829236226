import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multigrain.adapters import (
    AdapterBank,
    BankConfig,
    CompositionContext,
    FactorizationError,
    LoraModule,
    build_context,
    compose_delta,
    default_init_bound,
    default_kron_factor,
    init_krona,
    init_lora,
    init_module,
    param_count,
)
from multigrain.autodiff import Tensor

ATTRS = {"user": 4, "item": 3}
SITES = {"layer0/q": (16, 16), "layer0/v": (16, 16), "layer0/ff1": (16, 32)}
FINE = ["layer0/q", "layer0/v"]


def make_bank(decomposed=True, rank=2, seed=0, attrs=ATTRS, sites=SITES, fine=FINE):
    cfg = (BankConfig.decomposed(rank=rank) if decomposed
           else BankConfig.non_decomposed(rank=rank))
    return AdapterBank(attrs, sites, fine, cfg, np.random.default_rng(seed))


class TestInit:
    def test_zeroed_delta(self, rng):
        m = init_lora(8, 8, 2, rng)
        assert np.array_equal(m.materialize().data, np.zeros((8, 8)))
        k = init_krona(8, 8, 2, rng)
        assert np.array_equal(k.materialize().data, np.zeros((8, 8)))

    def test_same_seed_identical(self):
        a = init_module("lora", 8, 4, 2, np.random.default_rng(7))
        b = init_module("lora", 8, 4, 2, np.random.default_rng(7))
        assert np.array_equal(a.a.data, b.a.data)

    def test_uniform_bound_sampling_oracle(self):
        # 1e5 draws stay within the configured bound and fill most of it
        rng = np.random.default_rng(0)
        d_in = 10
        bound = default_init_bound(d_in)
        draws = []
        for _ in range(1000):
            m = init_lora(d_in, 10, 10, rng)
            draws.append(m.a.data.reshape(-1))
        flat = np.concatenate(draws)
        assert flat.size == 1e5
        assert np.abs(flat).max() <= bound
        assert np.abs(flat).max() > 0.95 * bound
        assert abs(flat.mean()) < 0.01 * bound

    def test_factorization_error(self, rng):
        with pytest.raises(FactorizationError):
            init_krona(8, 8, 3, rng)
        with pytest.raises(FactorizationError):
            init_krona(8, 8, 16, rng)

    def test_rank_bounds(self, rng):
        with pytest.raises(ValueError):
            init_lora(4, 4, 5, rng)

    def test_default_kron_factor_reproduces_wide_default(self):
        assert default_kron_factor(768, 768) == 24
        assert default_kron_factor(64, 64) == 8

    def test_krona_param_count_is_dims_sum(self, rng):
        m = init_krona(12, 18, 3, rng)
        assert m.c.size + m.d.size == 12 + 18


class TestComposeDelta:
    def test_mean_of_identical_equals_materialize(self, rng):
        m = init_lora(8, 8, 2, rng)
        m.b.data = rng.normal(size=m.b.shape)  # make the delta nonzero
        cd = compose_delta([m, m, m])
        assert np.allclose(cd.materialize().data, m.materialize().data,
                           rtol=1e-12, atol=1e-14)
        x = Tensor(rng.normal(size=(4, 8)))
        assert np.allclose(cd.apply(x).data, m.apply(x).data,
                           rtol=1e-12, atol=1e-14)

    def test_cancellation(self, rng):
        m = init_lora(8, 8, 2, rng)
        m.b.data = rng.normal(size=m.b.shape)
        neg = LoraModule(Tensor(-m.a.data), Tensor(m.b.data))
        x = Tensor(rng.normal(size=(3, 8)))
        out = compose_delta([m, neg]).apply(x)
        assert np.allclose(out.data, 0.0, atol=1e-12)

    def test_three_module_mean_matches_materialization_oracle(self, rng):
        mods = []
        for kind in ("lora", "krona", "lora"):
            m = init_module(kind, 16, 16, 4, rng)
            ten = m.b if kind == "lora" else m.d
            ten.data = rng.normal(size=ten.shape)
            mods.append(m)
        x = rng.normal(size=(5, 16))
        fused = compose_delta(mods).apply(Tensor(x)).data
        oracle = sum(m.materialize().data for m in mods) / 3.0
        assert np.allclose(fused, x @ oracle, rtol=1e-10, atol=1e-12)

    def test_linearity(self, rng):
        mods = [init_module("krona", 16, 16, 4, rng) for _ in range(2)]
        for m in mods:
            m.d.data = rng.normal(size=m.d.shape)
        cd = compose_delta(mods)
        x = rng.normal(size=(3, 16))
        y = rng.normal(size=(3, 16))
        a, b = 1.7, -0.3
        lhs = cd.apply(Tensor(a * x + b * y)).data
        rhs = a * cd.apply(Tensor(x)).data + b * cd.apply(Tensor(y)).data
        assert np.allclose(lhs, rhs, rtol=1e-10, atol=1e-12)

    def test_mixed_dims_rejected(self, rng):
        with pytest.raises(Exception):
            compose_delta([init_lora(8, 8, 2, rng), init_lora(8, 4, 2, rng)])


class TestBank:
    def test_sharing_structure_decomposed(self):
        bank = make_bank(decomposed=True)
        # one coarse module shared across attributes per site
        mu = bank.module_for("layer0/q", "user", "c")
        mi = bank.module_for("layer0/q", "item", "c")
        assert mu is mi
        # fine modules share C within an attribute
        f0 = bank.module_for("layer0/q", "user", 0)
        f1 = bank.module_for("layer0/q", "user", 1)
        assert f0.c is f1.c
        assert f0.d is not f1.d
        g0 = bank.module_for("layer0/q", "item", 0)
        assert g0.c is not f0.c

    def test_no_sharing_non_decomposed(self):
        bank = make_bank(decomposed=False)
        assert (bank.module_for("layer0/q", "user", "c")
                is not bank.module_for("layer0/q", "item", "c"))
        f0 = bank.module_for("layer0/q", "user", 0)
        f1 = bank.module_for("layer0/q", "user", 1)
        assert f0.a is not f1.a

    def test_shared_c_mutation_affects_all_fine(self, rng):
        bank = make_bank(decomposed=True)
        f0 = bank.module_for("layer0/q", "user", 0)
        f1 = bank.module_for("layer0/q", "user", 1)
        for f in (f0, f1):
            f.d.data = rng.normal(size=f.d.shape)
        before0 = f0.materialize().data.copy()
        before1 = f1.materialize().data.copy()
        f0.c.data = f0.c.data + 1.0  # shared C
        assert not np.array_equal(f0.materialize().data, before0)
        assert not np.array_equal(f1.materialize().data, before1)

    def test_private_d_mutation_is_local(self, rng):
        bank = make_bank(decomposed=True)
        f0 = bank.module_for("layer0/q", "user", 0)
        f1 = bank.module_for("layer0/q", "user", 1)
        f1_before = f1.materialize().data.copy()
        f0.d.data = rng.normal(size=f0.d.shape)
        assert np.array_equal(f1.materialize().data, f1_before)
        assert not np.array_equal(f0.materialize().data, np.zeros_like(f0.materialize().data))

    def test_fine_absent_at_intermediate(self):
        bank = make_bank()
        assert bank.module_for("layer0/ff1", "user", 0) is None
        assert bank.module_for("layer0/ff1", "user", "c") is not None

    def test_unknown_domain_raises(self):
        bank = make_bank()
        with pytest.raises(KeyError):
            bank.module_for("layer0/q", "user", 99)
        with pytest.raises(KeyError):
            bank.module_for("layer0/q", "nope", "c")

    def test_unknown_domain_fallback_counted(self):
        bank = make_bank()
        ctx = CompositionContext(mode="fine",
                                 entries=[("user", "c", 0.5), ("user", 99, 0.5)])
        counter = {}
        plan = bank.site_plan("layer0/q", [ctx], counter)
        assert counter["unseen_domain"] == 1
        mods = {id(m) for m, _, _ in plan}
        assert id(bank.module_for("layer0/q", "user", "cprime")) in mods

    def test_checkpoint_naming(self):
        bank = make_bank(decomposed=True)
        names = [n for n, _ in bank.named_parameters()]
        assert "layer0/q/shared/c/A" in names
        assert "layer0/q/shared/cprime/B" in names
        assert "layer0/q/user/f/C" in names
        assert "layer0/q/user/f0/D" in names
        assert len(names) == len(set(names))


class TestContexts:
    def test_fine_context_weights(self):
        ctx = build_context(ATTRS, "fine", sample_attrs={"user": 1, "item": 2})
        assert ctx.mode == "fine"
        assert len(ctx.entries) == 4
        assert all(abs(w - 0.25) < 1e-15 for _, _, w in ctx.entries)

    def test_weights_sum_to_one_all_modes(self):
        rng = np.random.default_rng(0)
        for mode in ("fine", "general", "avg", "rand", "coarse"):
            ctx = build_context(ATTRS, mode, sample_attrs={"user": 0, "item": 0},
                                rng=rng)
            assert abs(sum(w for _, _, w in ctx.entries) - 1.0) < 1e-12

    def test_fine_requires_attrs(self):
        with pytest.raises(ValueError):
            build_context(ATTRS, "fine")

    def test_rand_requires_rng(self):
        with pytest.raises(ValueError):
            build_context(ATTRS, "rand")

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            build_context(ATTRS, "bogus")

    def test_empty_context_rejected(self):
        with pytest.raises(ValueError):
            CompositionContext(mode="fine", entries=[])

    def test_site_plan_groups_batch(self):
        bank = make_bank()
        ctxs = [build_context(ATTRS, "fine", sample_attrs={"user": u, "item": 0})
                for u in (0, 0, 1)]
        plan = bank.site_plan("layer0/q", ctxs)
        # shared coarse: one entry covering all samples (weights merged)
        all_cover = [p for p in plan if p[2] is None]
        assert len(all_cover) >= 1
        user0 = bank.module_for("layer0/q", "user", 0)
        sub = [p for p in plan if p[0] is user0]
        assert len(sub) == 1 and list(sub[0][2]) == [0, 1]


class TestParamCount:
    def test_worked_example(self):
        attrs = {"user": 4, "item": 3}
        assert param_count(attrs, 32, 32, 8, decomposed=False) == 5632
        assert param_count(attrs, 32, 32, 8, decomposed=True) == 1312

    def test_degenerate_zero_fine_domains(self):
        # formula at |a|_f = 0: d_in + 2 r (d_in + d_out)
        got = param_count({"solo": 0}, 16, 24, 2, decomposed=True)
        assert got == 16 + 2 * 2 * (16 + 24)

    def test_bank_counting_oracle_single_site(self):
        attrs = {"user": 4, "item": 3}
        site = {"s": (32, 32)}
        for decomposed in (False, True):
            cfg = (BankConfig.decomposed(rank=8) if decomposed
                   else BankConfig.non_decomposed(rank=8))
            bank = AdapterBank(attrs, site, ["s"], cfg, np.random.default_rng(0))
            assert bank.num_parameters() == param_count(
                attrs, 32, 32, 8, decomposed=decomposed)

    @settings(max_examples=30, deadline=None)
    @given(st.data())
    def test_bank_counting_oracle_randomized(self, data):
        n_attr = data.draw(st.integers(1, 3))
        attrs = {f"a{i}": data.draw(st.integers(1, 6)) for i in range(n_attr)}
        factor = data.draw(st.sampled_from([1, 2, 4]))
        d_in = factor * data.draw(st.integers(1, 4))
        d_out = factor * data.draw(st.integers(1, 4))
        rank = data.draw(st.integers(1, min(d_in, d_out)))
        decomposed = data.draw(st.booleans())
        cfg = (BankConfig.decomposed(rank=rank, kron_factor=factor) if decomposed
               else BankConfig.non_decomposed(rank=rank))
        bank = AdapterBank(attrs, {"s": (d_in, d_out)}, ["s"], cfg,
                           np.random.default_rng(0))
        assert bank.num_parameters() == param_count(
            attrs, d_in, d_out, rank, decomposed=decomposed)

    def test_decomposed_smaller_at_paper_scale(self):
        for nf in (1, 2, 10, 1631):
            attrs = {"user": nf}
            assert (param_count(attrs, 768, 768, 128, True)
                    < param_count(attrs, 768, 768, 128, False))

    def test_invalid_schema(self):
        with pytest.raises(ValueError):
            param_count({}, 8, 8, 2, True)
        with pytest.raises(ValueError):
            param_count({"a": -1}, 8, 8, 2, True)
        with pytest.raises(ValueError):
            param_count({"a": 2}, 0, 8, 2, False)
