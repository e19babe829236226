"""Probe: scarce labels at asymptote (not shipped)."""
import json, sys, time
import numpy as np
from multigrain.adapters import BankConfig
from multigrain.data import SyntheticConfig, generate_synthetic
from multigrain.evaluate import accuracy_on
from multigrain.model import BackboneConfig, attach_bank, pretrain_base
from multigrain.training import TrainConfig, train_joint

def run(seed, alpha, n_dom, skew=0.4, ctr=0.6, pre=250, lr=7e-4,
        epochs=22, sep_epochs=6, batch=64, klw=0.3, rank=2):
    t0 = time.time()
    skw_ = dict(attributes={"user": 8, "item": 8}, num_classes=5,
                vocab_skew=skew, label_bias=0.7, samples_per_domain=n_dom,
                dev_per_domain=24, test_per_domain=48, seq_len=(12, 24),
                class_token_rate=ctr, seed=seed)
    splits = generate_synthetic(SyntheticConfig(**skw_))
    bcfg = BackboneConfig(vocab_size=splits.train.vocab_size, num_classes=5,
                          num_layers=2, d_model=64, num_heads=4, d_ff=128,
                          max_seq_len=32, dtype="float32", mode="mlm")
    base, _ = pretrain_base(bcfg, splits.train, steps=pre, batch_size=64,
                            seed=seed, lr=1e-3)
    attach_bank(base, splits.train.schema.attributes,
                BankConfig.decomposed(rank=rank), seed=seed)
    tcfg = TrainConfig(alpha=alpha, kl_weight=klw, lr=lr, batch_size=batch,
                       max_epochs=epochs, separation_max_epochs=sep_epochs,
                       patience=epochs + 1, seed=seed)
    jstate = train_joint(base, splits.train, splits.dev, tcfg)
    rng = np.random.default_rng(seed)
    accs = {s: accuracy_on(base, splits.test.samples, s, rng=rng)
            for s in ("fine", "coarse", "general", "rand", "avg")}
    return {"seed": seed, "alpha": alpha, "n": n_dom,
            "t": round(time.time()-t0,1),
            **{k: round(v, 4) for k, v in accs.items()}}

if __name__ == "__main__":
    which = int(sys.argv[1])
    grid = [(s, a, n) for n in (48, 64) for s in (0, 1, 2) for a in (0.5, 0.0)]
    for i, cfg in enumerate(grid):
        if i % 2 != which:
            continue
        print(json.dumps(run(*cfg)), flush=True)
