"""Command-line surface: generate, pretrain, train, eval, ablate, params.

Configuration precedence: built-in defaults < JSON config file (--config)
< explicit flags.  Every command echoes its fully resolved configuration
next to its outputs and fails with a single-line JSON error record on
stderr and a nonzero exit code.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .adapters import BankConfig, param_count
from .checkpoint import load_model, save_model
from .data import (
    Dataset,
    SyntheticConfig,
    generate_synthetic,
    load_dataset,
    save_splits,
)
from .evaluate import STRATEGIES, evaluate_model, metrics, predict_with_contexts
from .model import BackboneConfig, attach_bank, pretrain_base
from .reporting import (
    format_report_table,
    plot_ablation,
    plot_pretrain_curve,
    plot_training_curves,
    render_eval_outputs,
    write_csv,
    write_json,
    write_jsonl,
)
from .training import TrainConfig, build_view_context, train_joint

DEFAULTS: dict = {
    "seed": 0,
    "synthetic": {
        "attributes": {"user": 8, "item": 8},
        "num_classes": 5,
        "vocab_skew": 0.5,
        "label_bias": 0.7,
        "max_offset": 1,
        "samples_per_domain": 160,
        "dev_per_domain": 40,
        "test_per_domain": 60,
        "unlabeled_per_domain": 0,
        "seq_len": [16, 32],
    },
    "backbone": {
        "num_layers": 2,
        "d_model": 64,
        "num_heads": 4,
        "d_ff": 128,
        "max_seq_len": 64,
        "mode": "mlm",
        "dropout": 0.0,
        "cls_position": None,
        "tie_lm_head": True,
        "dtype": "float64",
    },
    "bank": {"rank": 4, "decomposed": True, "kron_factor": None},
    "pretrain": {"steps": 400, "lr": 1e-3, "batch_size": 32},
    "train": {
        "alpha": 0.5,
        "coarse_coeff": 0.5,
        "kl_weight": 1.0,
        "kl_stop_gradient": False,
        "lr": 3e-4,
        "clip_norm": 2.0,
        "weight_decay": 0.01,
        "batch_size": 32,
        "max_epochs": 20,
        "separation_max_epochs": 10,
        "patience": 3,
        "mask_ratio": 0.15,
        "bert_style_masking": False,
        "mask_without_loss": False,
        "unlabeled_mix": False,
    },
    "params": {"d_in": 768, "d_out": 768, "rank": 128},
    "strategy": "fine",
}


class CliError(RuntimeError):
    pass


def deep_update(base: dict, overlay: dict) -> dict:
    for k, v in overlay.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            deep_update(base[k], v)
        else:
            base[k] = v
    return base


def resolve_config(args, overrides: dict[str, object]) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise CliError(f"config file not found: {path}")
        deep_update(cfg, json.loads(path.read_text(encoding="utf-8")))
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = cfg
        *heads, leaf = dotted.split(".")
        for h in heads:
            node = node.setdefault(h, {})
        node[leaf] = value
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(
        json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def _resolved_path_for(output: Path) -> Path:
    if output.suffix:  # file-style output: write the echo next to it
        return output.parent / f"{output.stem}.config.json"
    return output / "resolved_config.json"


def _write_echo(cfg: dict, output: Path) -> None:
    p = _resolved_path_for(output)
    p.parent.mkdir(parents=True, exist_ok=True)
    write_json(p, {"config": cfg, "config_hash": config_hash(cfg)})


def _load_split(data: Path, split: str) -> Dataset:
    if data.is_dir():
        path = data / f"{split}.jsonl"
    else:
        path = data
    if not path.exists():
        raise CliError(f"dataset file not found: {path}")
    return load_dataset(path)


def _bank_config(cfg: dict) -> BankConfig:
    b = cfg["bank"]
    if b.get("decomposed", True):
        return BankConfig.decomposed(rank=int(b["rank"]),
                                     kron_factor=b.get("kron_factor"))
    return BankConfig.non_decomposed(rank=int(b["rank"]))


def _train_config(cfg: dict, **extra) -> TrainConfig:
    t = dict(cfg["train"])
    t.update(extra)
    return TrainConfig(seed=int(cfg["seed"]), **t)


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    cfg = resolve_config(args, {
        "seed": args.seed,
        "synthetic.label_bias": args.bias,
        "synthetic.vocab_skew": args.skew,
        "synthetic.samples_per_domain": args.samples_per_domain,
        "synthetic.unlabeled_per_domain": args.unlabeled_per_domain,
        "synthetic.num_classes": args.num_classes,
    })
    out = Path(args.out)
    syn = dict(cfg["synthetic"])
    syn["seq_len"] = tuple(syn["seq_len"])
    scfg = SyntheticConfig(seed=int(cfg["seed"]), **syn)
    splits = generate_synthetic(scfg)
    written = save_splits(splits, out)
    _write_echo(cfg, out)
    print(json.dumps({"written": written,
                      "train_samples": len(splits.train),
                      "vocab_size": splits.train.vocab_size}))
    return 0


def cmd_pretrain(args) -> int:
    cfg = resolve_config(args, {
        "seed": args.seed,
        "pretrain.steps": args.steps,
        "pretrain.lr": args.lr,
        "backbone.mode": args.mode,
    })
    corpus = _load_split(Path(args.data), "train")
    bcfg = BackboneConfig(vocab_size=corpus.vocab_size,
                          num_classes=corpus.num_classes,
                          **cfg["backbone"])
    state, history = pretrain_base(
        bcfg, corpus, steps=int(cfg["pretrain"]["steps"]),
        lr=float(cfg["pretrain"]["lr"]),
        batch_size=int(cfg["pretrain"]["batch_size"]),
        seed=int(cfg["seed"]))
    out = Path(args.out)
    save_model(out, state, extra={"config_hash": config_hash(cfg),
                                  "pretrain_steps": len(history)})
    _write_echo(cfg, out)
    if history:
        plot_pretrain_curve(history, out.parent / f"{out.stem}.loss.png")
    print(json.dumps({"checkpoint": str(out),
                      "steps": len(history),
                      "first_loss": history[0] if history else None,
                      "final_loss": history[-1] if history else None}))
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args, {
        "seed": args.seed,
        "train.alpha": args.alpha,
        "train.coarse_coeff": args.coarse_coeff,
        "train.kl_weight": args.kl_weight,
        "train.lr": args.lr,
        "train.max_epochs": args.max_epochs,
        "train.batch_size": args.batch_size,
        "train.unlabeled_mix": args.unlabeled_mix,
        "bank.rank": args.rank,
    })
    data = Path(args.data)
    train_ds = _load_split(data, "train")
    dev_ds = _load_split(data, "dev")
    tcfg = _train_config(cfg)
    unlabeled = None
    if tcfg.unlabeled_mix:
        unl_path = data / "unlabeled.jsonl"
        if not unl_path.exists():
            raise CliError(f"unlabeled_mix set but {unl_path} is missing")
        unlabeled = load_dataset(unl_path)
    state, _meta = load_model(Path(args.base))
    if state.config.vocab_size != train_ds.vocab_size:
        raise CliError(
            f"base model vocab {state.config.vocab_size} != dataset vocab "
            f"{train_ds.vocab_size}")
    attach_bank(state, train_ds.schema.attributes, _bank_config(cfg),
                seed=int(cfg["seed"]))
    jstate = train_joint(state, train_ds, dev_ds, tcfg, unlabeled=unlabeled)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "model.ckpt"
    save_model(ckpt, state, extra={"config_hash": config_hash(cfg),
                                   "train": asdict(tcfg)})
    write_jsonl(out / "train_log.jsonl", jstate.step_log)
    write_jsonl(out / "epoch_history.jsonl", jstate.epoch_history)
    plot_training_curves(jstate.step_log, jstate.epoch_history,
                         out / "training_curves.png")
    joint_epochs = [r for r in jstate.epoch_history if r["phase"] == "joint"]
    summary = {
        "config_hash": config_hash(cfg),
        "steps": jstate.step,
        "joint_epochs": len(joint_epochs),
        "best_dev_acc_fine": max(r["dev_acc_fine"] for r in joint_epochs),
        "separation": jstate.separation_summary,
    }
    write_json(out / "summary.json", summary)
    _write_echo(cfg, out)
    print(json.dumps({"checkpoint": str(ckpt), **summary}))
    return 0


def cmd_eval(args) -> int:
    cfg = resolve_config(args, {"seed": args.seed, "strategy": args.strategy})
    strategy = cfg["strategy"]
    if strategy not in STRATEGIES:
        raise CliError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    dataset = _load_split(Path(args.data), args.split)
    state, _meta = load_model(Path(args.checkpoint))
    if state.bank is None:
        raise CliError("checkpoint has no adapter bank; evaluate a trained model")
    report = evaluate_model(state, dataset, strategy, seed=int(cfg["seed"]))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = render_eval_outputs(report, out)
    _write_echo(cfg, out)
    print(format_report_table(report))
    print(json.dumps({"files": files, "accuracy": report.accuracy,
                      "rmse": report.rmse, "macro_f1": report.macro_f1}))
    return 0


def _ablation_grid(attributes: dict[str, int], mode: str) -> list[tuple[str, dict]]:
    grid: list[tuple[str, dict]] = [("full", {})]
    grid.append(("- coarse view",
                 {"nn_view_spec": {a: ["f"] for a in attributes}}))
    for a in attributes:
        spec = {b: ["c", "f"] for b in attributes}
        spec[a] = ["c"]
        grid.append((f"- fine-grained view ({a})", {"nn_view_spec": spec}))
    grid.append(("- fine-grained view (all)",
                 {"nn_view_spec": {a: ["c"] for a in attributes}}))
    grid.append(("- text generation task", {"alpha": 0.0}))
    if mode == "mlm":
        grid.append(("- text generation task (except randomly masking)",
                     {"alpha": 0.0, "mask_without_loss": True}))
    return grid


def cmd_ablate(args) -> int:
    cfg = resolve_config(args, {
        "seed": args.seed,
        "train.alpha": args.alpha,
        "train.max_epochs": args.max_epochs,
    })
    data = Path(args.data)
    train_ds = _load_split(data, "train")
    dev_ds = _load_split(data, "dev")
    test_ds = _load_split(data, "test")
    attributes = train_ds.schema.attributes
    gold = np.array([s.label for s in test_ds.samples], dtype=np.int64)
    base_state, _ = load_model(Path(args.base))
    rows: list[dict] = []
    for variant, extra in _ablation_grid(attributes, base_state.config.mode):
        state, _ = load_model(Path(args.base))
        attach_bank(state, attributes, _bank_config(cfg), seed=int(cfg["seed"]))
        tcfg = _train_config(cfg, **extra)
        jstate = train_joint(state, train_ds, dev_ds, tcfg)
        spec = tcfg.nn_view_spec
        preds = predict_with_contexts(
            state, test_ds.samples,
            lambda s: build_view_context(attributes, s.attrs, spec))
        acc, rmse, f1 = metrics(gold, preds)
        rows.append({"variant": variant, "accuracy": acc, "rmse": rmse,
                     "macro_f1": f1, "steps": jstate.step})
    base_acc = rows[0]["accuracy"]
    for r in rows:
        r["delta_accuracy"] = r["accuracy"] - base_acc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "ablation.csv",
              ["variant", "accuracy", "delta_accuracy", "rmse", "macro_f1", "steps"],
              [[r["variant"], f"{r['accuracy']:.6f}", f"{r['delta_accuracy']:+.6f}",
                f"{r['rmse']:.6f}", f"{r['macro_f1']:.6f}", r["steps"]]
               for r in rows])
    plot_ablation(rows, out / "ablation.png")
    write_json(out / "ablation.json", rows)
    _write_echo(cfg, out)
    for r in rows:
        print(f"{r['variant']:<32} acc={r['accuracy']:.4f} "
              f"delta={r['delta_accuracy']:+.4f}")
    return 0


def _parse_schema(text: str) -> dict[str, int]:
    out = {}
    for part in text.split(","):
        name, _, count = part.partition("=")
        if not count:
            raise CliError(f"bad schema entry {part!r}; use name=count")
        out[name.strip()] = int(count)
    return out


def cmd_params(args) -> int:
    cfg = resolve_config(args, {
        "params.d_in": args.d_in,
        "params.d_out": args.d_out,
        "params.rank": args.rank,
    })
    if args.schema:
        attributes = _parse_schema(args.schema)
    else:
        attributes = {k: int(v) for k, v in cfg["synthetic"]["attributes"].items()}
    p = cfg["params"]
    d_in, d_out, rank = int(p["d_in"]), int(p["d_out"]), int(p["rank"])
    plain = param_count(attributes, d_in, d_out, rank, decomposed=False)
    decomposed = param_count(attributes, d_in, d_out, rank, decomposed=True)
    result = {
        "attributes": attributes,
        "d_in": d_in, "d_out": d_out, "rank": rank,
        "non_decomposed": plain,
        "decomposed": decomposed,
        "reduction_factor": plain / decomposed if decomposed else None,
    }
    print(f"non-decomposed: {plain}")
    print(f"decomposed:     {decomposed}")
    print(f"reduction:      {result['reduction_factor']:.2f}x")
    if args.json_out:
        write_json(Path(args.json_out), result)
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="multigrain",
        description="Multi-attribute multi-grained adapter experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("generate", help="write a synthetic non-IID dataset")
    common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--bias", type=float, default=None,
                   help="label-bias strength in [0, 1]")
    p.add_argument("--skew", type=float, default=None,
                   help="vocabulary-skew strength in [0, 1]")
    p.add_argument("--samples-per-domain", type=int, default=None)
    p.add_argument("--unlabeled-per-domain", type=int, default=None)
    p.add_argument("--num-classes", type=int, default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("pretrain", help="train the frozen base model")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory or file")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--mode", choices=["mlm", "arm"], default=None)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="joint adapter training with separation")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--base", required=True, help="pretrained base checkpoint")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--coarse-coeff", type=float, default=None)
    p.add_argument("--kl-weight", type=float, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--max-epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--rank", type=int, default=None)
    p.add_argument("--unlabeled-mix", action="store_const", const=True,
                   default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained checkpoint")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory or file")
    p.add_argument("--split", choices=["train", "dev", "test"], default="test")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--strategy", choices=list(STRATEGIES), default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the ablation grid")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--base", required=True, help="pretrained base checkpoint")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--max-epochs", type=int, default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("params", help="parameter budget for both schemes")
    common(p)
    p.add_argument("--schema", help="attribute domains, e.g. user=1631,item=1633")
    p.add_argument("--d-in", type=int, default=None)
    p.add_argument("--d-out", type=int, default=None)
    p.add_argument("--rank", type=int, default=None)
    p.add_argument("--json-out", help="also write the result as JSON")
    p.set_defaults(func=cmd_params)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as e:  # noqa: BLE001  single-line machine-parseable record
        sys.stderr.write(json.dumps(
            {"error": str(e), "type": type(e).__name__,
             "command": args.command}) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
