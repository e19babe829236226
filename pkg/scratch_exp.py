"""Calibration driver for the synthetic directional experiment (not shipped)."""
import sys
import time

import numpy as np

from multigrain.adapters import BankConfig
from multigrain.data import SyntheticConfig, generate_synthetic
from multigrain.evaluate import accuracy_on, evaluate_model
from multigrain.model import BackboneConfig, attach_bank, pretrain_base
from multigrain.training import TrainConfig, train_joint


def run_seed(seed, alpha, synth_kw=None, train_kw=None, pre_steps=300, verbose=True):
    t0 = time.time()
    skw = dict(attributes={"user": 8, "item": 8}, num_classes=5,
               vocab_skew=0.5, label_bias=0.7, samples_per_domain=160,
               dev_per_domain=40, test_per_domain=60, seed=seed)
    if synth_kw:
        skw.update(synth_kw)
    splits = generate_synthetic(SyntheticConfig(**skw))
    bcfg = BackboneConfig(vocab_size=splits.train.vocab_size,
                          num_classes=splits.train.num_classes,
                          num_layers=2, d_model=64, num_heads=4, d_ff=128,
                          max_seq_len=40)
    base, hist = pretrain_base(bcfg, splits.train, steps=pre_steps, seed=seed)
    t1 = time.time()
    tkw = dict(alpha=alpha, lr=3e-4, batch_size=32, max_epochs=12,
               separation_max_epochs=6, patience=3, seed=seed)
    if train_kw:
        tkw.update(train_kw)
    attach_bank(base, splits.train.schema.attributes,
                BankConfig.decomposed(rank=4), seed=seed)
    jstate = train_joint(base, splits.train, splits.dev, TrainConfig(**tkw))
    t2 = time.time()
    accs = {}
    rng = np.random.default_rng(seed)
    for strat in ("fine", "coarse", "general", "rand", "avg"):
        accs[strat] = accuracy_on(base, splits.test.samples, strat, rng=rng)
    t3 = time.time()
    if verbose:
        je = [r for r in jstate.epoch_history if r["phase"] == "joint"]
        print(f"seed={seed} alpha={alpha} pre={t1-t0:.1f}s train={t2-t1:.1f}s "
              f"eval={t3-t2:.1f}s epochs={len(je)} "
              f"pre_loss {hist[0]:.2f}->{hist[-1]:.2f} "
              f"sep={jstate.separation_summary}")
        print(f"  accs: {', '.join(f'{k}={v:.3f}' for k, v in accs.items())}")
    return accs, jstate


if __name__ == "__main__":
    seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
    alpha = float(sys.argv[2]) if len(sys.argv) > 2 else 0.5
    run_seed(seed, alpha)
