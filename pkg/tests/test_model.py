"""Backbone forward contracts: zero-delta preservation, an independent
straight-line reference forward (adapter deltas folded into the weights),
causality, per-sample batching equivalence, and base pretraining."""

import math

import numpy as np
import pytest

from multigrain.adapters import BankConfig, build_context
from multigrain.autodiff import ShapeError
from multigrain.data import Sample, SyntheticConfig, collate, generate_synthetic
from multigrain.model import (
    BackboneConfig,
    ModeError,
    attach_bank,
    encode,
    forward_arm,
    forward_classify,
    forward_mlm,
    generation_loss,
    init_model,
    pretrain_base,
)

ATTRS = {"user": 3, "item": 2}


def tiny_config(mode="mlm", **kw):
    defaults = dict(vocab_size=23, num_classes=3, num_layers=1, d_model=8,
                    num_heads=2, d_ff=16, max_seq_len=12, mode=mode)
    defaults.update(kw)
    return BackboneConfig(**defaults)


def make_samples(rng, n, vocab=23, max_len=8, attrs=ATTRS, num_classes=3):
    out = []
    for _ in range(n):
        ln = int(rng.integers(2, max_len))
        out.append(Sample(tokens=list(rng.integers(3, vocab, size=ln)),
                          label=int(rng.integers(num_classes)),
                          attrs={a: int(rng.integers(nd)) for a, nd in attrs.items()}))
    return out


def make_model(mode="mlm", seed=0, with_bank=True, randomize_bank=None, **kw):
    state = init_model(tiny_config(mode, **kw), seed=seed)
    if with_bank:
        attach_bank(state, ATTRS, BankConfig.decomposed(rank=2, kron_factor=2),
                    seed=seed + 1)
        if randomize_bank is not None:
            for _, t in state.bank.named_parameters():
                t.data = randomize_bank.normal(scale=0.3, size=t.data.shape)
    return state


# ---------------------------------------------------------------------------
# independent straight-line forward (numpy only, adapters folded into W)


def ref_layer_norm(x, g, b, eps):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc ** 2).mean(-1, keepdims=True)
    return g * (xc / np.sqrt(var + eps)) + b


def ref_gelu(x):
    u = math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)
    return 0.5 * x * (1.0 + np.tanh(u))


def ref_softmax(x):
    z = x - x.max(-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(-1, keepdims=True)


def ref_forward_single(state, tokens, deltas):
    """One unpadded sample through the encoder, deltas folded into weights.

    deltas maps site key -> materialized [d_in, d_out] update for this
    sample, realizing W + mean(w) literally.
    """
    cfg = state.config
    p = {k: t.data for k, t in state.params.items()}
    s = len(tokens)
    h = p["embed/tok"][np.asarray(tokens)] + p["embed/pos"][:s]
    causal = cfg.mode == "arm"
    for i in range(cfg.num_layers):
        x = ref_layer_norm(h, p[f"layer{i}/ln1/gamma"], p[f"layer{i}/ln1/beta"],
                           cfg.ln_eps)
        wq = p[f"layer{i}/q/W"] + deltas.get(f"layer{i}/q", 0.0)
        wv = p[f"layer{i}/v/W"] + deltas.get(f"layer{i}/v", 0.0)
        q = x @ wq + p[f"layer{i}/q/b"]
        k = x @ p[f"layer{i}/k/W"] + p[f"layer{i}/k/b"]
        v = x @ wv + p[f"layer{i}/v/b"]
        dh = cfg.head_dim
        qh = q.reshape(s, cfg.num_heads, dh).transpose(1, 0, 2)
        kh = k.reshape(s, cfg.num_heads, dh).transpose(1, 0, 2)
        vh = v.reshape(s, cfg.num_heads, dh).transpose(1, 0, 2)
        scores = qh @ kh.transpose(0, 2, 1) / math.sqrt(dh)
        if causal:
            tri = np.where(np.arange(s)[None, :] <= np.arange(s)[:, None],
                           0.0, -1e9)
            scores = scores + tri[None]
        probs = ref_softmax(scores)
        ctx = (probs @ vh).transpose(1, 0, 2).reshape(s, cfg.d_model)
        h = h + ctx @ p[f"layer{i}/o/W"] + p[f"layer{i}/o/b"]
        x = ref_layer_norm(h, p[f"layer{i}/ln2/gamma"], p[f"layer{i}/ln2/beta"],
                           cfg.ln_eps)
        wf = p[f"layer{i}/ff1/W"] + deltas.get(f"layer{i}/ff1", 0.0)
        f1 = ref_gelu(x @ wf + p[f"layer{i}/ff1/b"])
        h = h + f1 @ p[f"layer{i}/ff2/W"] + p[f"layer{i}/ff2/b"]
    h = ref_layer_norm(h, p["final/gamma"], p["final/beta"], cfg.ln_eps)
    pos = 0 if cfg.cls_position == "first" else s - 1
    return h[pos] @ p["head/cls/W"] + p["head/cls/b"]


def fold_deltas(state, ctx):
    """Materialize the per-site weight update a context implies (slots with
    no module at a site contribute zero), the Eq. 7/8 weight-space route."""
    deltas = {}
    for site in state.bank.sites:
        items = []
        for attr, tag, w in ctx.entries:
            m = (state.bank.module_for(site, attr, tag)
                 if not isinstance(tag, int) or site in state.bank.fine_sites
                 else None)
            if m is not None:
                items.append((m, w))
        if not items:
            continue
        deltas[site] = sum(w * m.materialize().data for m, w in items)
    return deltas


class TestZeroInitPreservation:
    @pytest.mark.parametrize("mode", ["mlm", "arm"])
    def test_all_forwards_match_base(self, mode, rng):
        fresh = make_model(mode)            # zero-init bank
        bare = make_model(mode, with_bank=False)
        samples = make_samples(rng, 6)
        batch = collate(samples, mode, mask_ratio=0.3, rng=np.random.default_rng(0))
        ctxs = [build_context(ATTRS, "fine", sample_attrs=s.attrs) for s in samples]
        with_bank = forward_classify(fresh, batch, ctxs).data
        without = forward_classify(bare, batch).data
        assert np.allclose(with_bank, without, atol=1e-12, rtol=0)
        if mode == "mlm":
            a = forward_mlm(fresh, batch, ctxs).data
            b = forward_mlm(bare, batch).data
        else:
            a = forward_arm(fresh, batch, ctxs).data
            b = forward_arm(bare, batch).data
        assert np.allclose(a, b, atol=1e-12, rtol=0)

    def test_determinism(self, rng):
        state = make_model(randomize_bank=np.random.default_rng(3))
        samples = make_samples(rng, 4)
        batch = collate(samples, "mlm", with_generation=False)
        ctxs = [build_context(ATTRS, "fine", sample_attrs=s.attrs) for s in samples]
        a = forward_classify(state, batch, ctxs).data
        b = forward_classify(state, batch, ctxs).data
        assert np.array_equal(a, b)


class TestReferenceForwardOracle:
    @pytest.mark.parametrize("mode", ["mlm", "arm"])
    def test_single_samples_match_reference(self, mode, rng):
        state = make_model(mode, randomize_bank=np.random.default_rng(11))
        samples = make_samples(rng, 5)
        for s in samples:
            ctx = build_context(ATTRS, "fine", sample_attrs=s.attrs)
            batch = collate([s], mode, with_generation=False)
            got = forward_classify(state, batch, [ctx]).data[0]
            want = ref_forward_single(state, [1] + s.tokens, fold_deltas(state, ctx))
            assert np.allclose(got, want, rtol=1e-10, atol=1e-12)

    def test_batched_mixed_contexts_match_reference(self, rng):
        state = make_model(randomize_bank=np.random.default_rng(12))
        samples = make_samples(rng, 7)
        ctxs = [build_context(ATTRS, "fine", sample_attrs=s.attrs) for s in samples]
        batch = collate(samples, "mlm", with_generation=False)
        got = forward_classify(state, batch, ctxs).data
        for i, (s, ctx) in enumerate(zip(samples, ctxs)):
            want = ref_forward_single(state, [1] + s.tokens, fold_deltas(state, ctx))
            assert np.allclose(got[i], want, rtol=1e-10, atol=1e-12)


class TestBatchingEquivalence:
    def test_mixed_batch_equals_singletons(self, rng):
        state = make_model(randomize_bank=np.random.default_rng(4))
        samples = make_samples(rng, 8)
        ctxs = [build_context(ATTRS, "fine", sample_attrs=s.attrs) for s in samples]
        batch = collate(samples, "mlm", with_generation=False)
        together = forward_classify(state, batch, ctxs).data
        for i, s in enumerate(samples):
            solo = collate([s], "mlm", with_generation=False)
            alone = forward_classify(state, solo, [ctxs[i]]).data[0]
            assert np.allclose(together[i], alone, rtol=1e-10, atol=1e-12)


class TestCausality:
    def test_future_perturbation_leaves_past_logits(self, rng):
        state = make_model("arm", randomize_bank=np.random.default_rng(5))
        tokens = list(rng.integers(3, 23, size=8))
        s1 = Sample(tokens=tokens, label=0, attrs={"user": 0, "item": 0})
        t = 4
        tokens2 = list(tokens)
        tokens2[t + 1] = (tokens2[t + 1] - 3 + 1) % 20 + 3  # change one future token
        s2 = Sample(tokens=tokens2, label=0, attrs={"user": 0, "item": 0})
        ctx = build_context(ATTRS, "fine", sample_attrs=s1.attrs)
        out1 = forward_arm(state, collate([s1], "arm"), [ctx]).data
        out2 = forward_arm(state, collate([s2], "arm"), [ctx]).data
        # +1 anchor offset: content position t is input position t+1
        assert np.array_equal(out1[0, :t + 2], out2[0, :t + 2])
        assert not np.array_equal(out1[0, t + 2], out2[0, t + 2])

    def test_length_one_sequence(self, rng):
        state = make_model("arm")
        s = Sample(tokens=[5], label=0, attrs={"user": 0, "item": 0})
        batch = collate([s], "arm")
        assert batch.gen_b.size == 1  # BOS predicts the single token
        out = forward_arm(state, batch)
        assert out.shape == (1, 2, 23)


class TestMlmScoring:
    def test_logits_only_at_masked_positions(self, rng):
        state = make_model("mlm")
        samples = make_samples(rng, 3)
        batch = collate(samples, "mlm", mask_ratio=0.5, rng=np.random.default_rng(1))
        out = forward_mlm(state, batch)
        assert out.shape == (batch.gen_b.size, 23)

    def test_zero_masked_positions_empty_loss(self):
        state = make_model("mlm")
        s = Sample(tokens=[5], label=0, attrs={"user": 0, "item": 0})
        batch = collate([s], "mlm", mask_ratio=0.15, rng=np.random.default_rng(0))
        assert batch.gen_b.size == 0
        h = encode(state, batch.input_ids, batch.lengths)
        assert generation_loss(state, h, batch).item() == 0.0

    def test_fully_masked_accepted(self):
        state = make_model("mlm")
        s = Sample(tokens=[5, 6, 7, 8], label=0, attrs={"user": 0, "item": 0})
        batch = collate([s], "mlm", mask_ratio=1.0, rng=np.random.default_rng(0))
        out = forward_mlm(state, batch)
        assert out.shape == (4, 23)

    def test_mode_mismatch(self, rng):
        state = make_model("mlm")
        batch = collate(make_samples(rng, 2), "mlm", rng=np.random.default_rng(0))
        with pytest.raises(ModeError):
            forward_arm(state, batch)
        state_arm = make_model("arm")
        with pytest.raises(ModeError):
            forward_mlm(state_arm, batch)


class TestErrors:
    def test_sequence_too_long(self, rng):
        state = make_model(max_seq_len=6)
        s = Sample(tokens=list(rng.integers(3, 23, size=10)), label=0,
                   attrs={"user": 0, "item": 0})
        batch = collate([s], "mlm", with_generation=False)
        with pytest.raises(ShapeError):
            forward_classify(state, batch)

    def test_unknown_domain_in_ctx(self, rng):
        state = make_model()
        samples = make_samples(rng, 1)
        batch = collate(samples, "mlm", with_generation=False)
        bad_ctx = build_context(ATTRS, "fine", sample_attrs={"user": 0, "item": 0})
        bad_ctx.entries[1] = ("user", 99, bad_ctx.entries[1][2])
        with pytest.raises(KeyError):
            forward_classify(state, batch, [bad_ctx])

    def test_token_out_of_vocab(self):
        state = make_model()
        s = Sample(tokens=[22, 23], label=0, attrs={"user": 0, "item": 0})
        batch = collate([s], "mlm", with_generation=False)
        with pytest.raises(IndexError):
            forward_classify(state, batch)


class TestPretrain:
    def test_zero_steps_is_random_init(self):
        cfg = SyntheticConfig(samples_per_domain=4, dev_per_domain=2,
                              test_per_domain=2, seed=0)
        corpus = generate_synthetic(cfg).train
        bcfg = tiny_config(vocab_size=corpus.vocab_size, num_classes=5)
        state, history = pretrain_base(bcfg, corpus, steps=0, seed=3)
        fresh = init_model(bcfg, seed=3)
        assert history == []
        for name, t in state.params.items():
            assert np.array_equal(t.data, fresh.params[name].data)

    def test_lm_loss_improves_on_held_out(self):
        cfg = SyntheticConfig(attributes={"user": 2, "item": 2},
                              samples_per_domain=60, dev_per_domain=10,
                              test_per_domain=2, seed=1)
        splits = generate_synthetic(cfg)
        bcfg = tiny_config(vocab_size=splits.train.vocab_size, num_classes=5,
                           d_model=16, d_ff=32, max_seq_len=40)

        def held_out_loss(state):
            rng = np.random.default_rng(7)
            batch = collate(splits.dev.samples[:32], "mlm", rng=rng)
            h = encode(state, batch.input_ids, batch.lengths)
            return generation_loss(state, h, batch).item()

        state0, _ = pretrain_base(bcfg, splits.train, steps=0, seed=5)
        state, history = pretrain_base(bcfg, splits.train, steps=120, seed=5)
        assert held_out_loss(state) < held_out_loss(state0)
        assert len(history) == 120

    def test_deterministic_given_seed(self):
        cfg = SyntheticConfig(samples_per_domain=4, dev_per_domain=2,
                              test_per_domain=2, seed=0)
        corpus = generate_synthetic(cfg).train
        bcfg = tiny_config(vocab_size=corpus.vocab_size, num_classes=5,
                           max_seq_len=40)
        s1, h1 = pretrain_base(bcfg, corpus, steps=15, seed=9)
        s2, h2 = pretrain_base(bcfg, corpus, steps=15, seed=9)
        assert h1 == h2
        for name, t in s1.params.items():
            assert np.array_equal(t.data, s2.params[name].data)

    def test_empty_corpus_rejected(self):
        from multigrain.data import AttributeSchema, Dataset
        ds = Dataset(schema=AttributeSchema({"user": 1}), vocab_size=10,
                     num_classes=2, samples=[])
        with pytest.raises(ValueError):
            pretrain_base(tiny_config(vocab_size=10, num_classes=2), ds, steps=1)
