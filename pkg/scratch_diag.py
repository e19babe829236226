"""Composition diagnostics on one trained model (not shipped)."""
import json
import numpy as np
from multigrain.adapters import ALIGN, COARSE, BankConfig, CompositionContext
from multigrain.data import SyntheticConfig, generate_synthetic
from multigrain.evaluate import accuracy_on, predict_with_contexts
from multigrain.model import BackboneConfig, attach_bank, pretrain_base
from multigrain.training import TrainConfig, train_joint

seed = 0
skw = dict(attributes={"user": 8, "item": 8}, num_classes=5,
           vocab_skew=0.35, label_bias=0.7, samples_per_domain=128,
           dev_per_domain=16, test_per_domain=40, seq_len=(12, 24),
           class_token_rate=0.65, seed=seed)
splits = generate_synthetic(SyntheticConfig(**skw))
bcfg = BackboneConfig(vocab_size=splits.train.vocab_size, num_classes=5,
                      num_layers=2, d_model=64, num_heads=4, d_ff=128,
                      max_seq_len=32, dtype="float32", mode="mlm")
base, _ = pretrain_base(bcfg, splits.train, steps=250, batch_size=64, seed=seed, lr=1e-3)
attach_bank(base, splits.train.schema.attributes, BankConfig.decomposed(rank=2), seed=seed)
tcfg = TrainConfig(alpha=0.5, kl_weight=0.3, lr=1e-3, batch_size=64,
                   max_epochs=16, separation_max_epochs=4, patience=5, seed=seed)
train_joint(base, splits.train, splits.dev, tcfg)

test = splits.test.samples
gold = np.array([s.label for s in test])
A = {"user": 8, "item": 8}

def acc_entries(entries):
    ctx = CompositionContext(mode="fine", entries=entries)
    preds = predict_with_contexts(base, test, lambda s: ctx)
    return round(float((gold == preds).mean()), 4)

both = [("user", COARSE, 0.25), ("user", ALIGN, 0.25),
        ("item", COARSE, 0.25), ("item", ALIGN, 0.25)]
avg_entries = []
for a in A:
    avg_entries.append((a, ALIGN, 0.25))
    avg_entries += [(a, s, 0.25 / 8) for s in range(8)]
out = {
    "general(c/2+c'/2)": acc_entries(both),
    "c_full": acc_entries([("user", COARSE, 1.0)]),
    "cprime_full": acc_entries([("user", ALIGN, 1.0)]),
    "c_half+meanfine_half": acc_entries(
        [("user", COARSE, 0.25), ("item", COARSE, 0.25)]
        + [(a, s, 0.25 / 8) for a in A for s in range(8)]),
    "avg(c'_half+meanfine_half)": acc_entries(avg_entries),
}
for s in ("fine", "coarse", "general", "avg", "rand"):
    out[f"strategy_{s}"] = round(accuracy_on(base, test, s,
                                             rng=np.random.default_rng(0)), 4)
print(json.dumps(out, indent=1))
