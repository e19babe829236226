"""Margin/timing matrix for the acceptance experiment (not shipped)."""
import json
import os
import sys
import time

import numpy as np

from multigrain.adapters import BankConfig
from multigrain.data import SyntheticConfig, generate_synthetic
from multigrain.evaluate import accuracy_on
from multigrain.model import BackboneConfig, attach_bank, pretrain_base
from multigrain.training import TrainConfig, train_joint


def run(seed, alpha, rank, ctr, dtype, synth_extra=None):
    t0 = time.time()
    skw = dict(attributes={"user": 8, "item": 8}, num_classes=5,
               vocab_skew=0.5, label_bias=0.7, samples_per_domain=128,
               dev_per_domain=16, test_per_domain=40, seq_len=(12, 24),
               class_token_rate=ctr, seed=seed)
    if synth_extra:
        skw.update(synth_extra)
    splits = generate_synthetic(SyntheticConfig(**skw))
    bcfg = BackboneConfig(vocab_size=splits.train.vocab_size, num_classes=5,
                          num_layers=2, d_model=64, num_heads=4, d_ff=128,
                          max_seq_len=32, dtype=dtype)
    base, hist = pretrain_base(bcfg, splits.train, steps=250, batch_size=64,
                               seed=seed)
    t1 = time.time()
    attach_bank(base, splits.train.schema.attributes,
                BankConfig.decomposed(rank=rank), seed=seed)
    tcfg = TrainConfig(alpha=alpha, lr=1.5e-3, batch_size=128, max_epochs=7,
                       separation_max_epochs=3, patience=2, seed=seed)
    jstate = train_joint(base, splits.train, splits.dev, tcfg)
    t2 = time.time()
    rng = np.random.default_rng(seed)
    accs = {s: accuracy_on(base, splits.test.samples, s, rng=rng)
            for s in ("fine", "coarse", "general", "rand", "avg")}
    return {"seed": seed, "alpha": alpha, "rank": rank, "ctr": ctr,
            "dtype": dtype, "pre_s": round(t1 - t0, 1),
            "train_s": round(t2 - t1, 1),
            "sep": jstate.separation_summary, **{k: round(v, 4) for k, v in accs.items()}}


if __name__ == "__main__":
    which = int(sys.argv[1])
    out = sys.argv[2]
    rows = []
    # two workers split the grid by parity
    grid = []
    for seed in (0, 1):
        for alpha in (0.5, 0.0):
            for rank, ctr, dtype in ((4, 0.5, "float64"), (2, 0.7, "float64"),
                                     (2, 0.7, "float32")):
                grid.append((seed, alpha, rank, ctr, dtype))
    for i, cfg in enumerate(grid):
        if i % 2 != which:
            continue
        rows.append(run(*cfg))
        print(json.dumps(rows[-1]), flush=True)
    with open(out, "w") as fh:
        json.dump(rows, fh, indent=1)
