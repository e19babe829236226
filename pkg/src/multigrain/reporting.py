"""Report rendering: JSON documents, CSV tables, and matplotlib figures.

Every artifact is written atomically (temp file + rename) so rerunning a
command overwrites its outputs in place.
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .evaluate import EvalReport  # noqa: E402


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2) + "\n")


def write_jsonl(path, records: list[dict]) -> None:
    atomic_write_text(path, "".join(json.dumps(r) + "\n" for r in records))


def write_csv(path, header: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(header)
    writer.writerows(rows)
    atomic_write_text(path, buf.getvalue())


def _atomic_savefig(fig, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".png.tmp")
    os.close(fd)
    try:
        fig.savefig(tmp, format="png", dpi=120, bbox_inches="tight")
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
        plt.close(fig)


def plot_training_curves(step_log: list[dict], epoch_history: list[dict], path) -> None:
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    steps = [r["step"] for r in step_log]
    ax1.plot(steps, [r["total"] for r in step_log], lw=0.8, label="total")
    kl = [(r["step"], r["kl"]) for r in step_log if r.get("kl") is not None]
    if kl:
        ax1.plot([s for s, _ in kl], [v for _, v in kl], lw=0.8, label="kl")
    sep_steps = [r["step"] for r in step_log if r["phase"] == "separation"]
    if sep_steps:
        ax1.axvline(sep_steps[0], color="gray", ls="--", lw=0.8)
    ax1.set_xlabel("step")
    ax1.set_ylabel("loss")
    ax1.legend(frameon=False)
    ax1.set_title("training loss")

    epochs = range(1, len(epoch_history) + 1)
    fine = [r["dev_acc_fine"] for r in epoch_history]
    general = [r["dev_acc_general"] for r in epoch_history]
    ax2.plot(list(epochs), [a if a is not None else float("nan") for a in fine],
             marker="o", ms=3, label="dev acc (fine)")
    ax2.plot(list(epochs), general, marker="s", ms=3, label="dev acc (general)")
    ax2.set_xlabel("evaluation")
    ax2.set_ylabel("accuracy")
    ax2.legend(frameon=False)
    ax2.set_title("dev accuracy")
    fig.tight_layout()
    _atomic_savefig(fig, path)


def plot_pretrain_curve(history: list[float], path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(range(1, len(history) + 1), history, lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("LM loss")
    ax.set_title("base pretraining")
    _atomic_savefig(fig, path)


def plot_per_domain_accuracy(report: EvalReport, path) -> None:
    attrs = list(report.per_domain_accuracy)
    fig, axes = plt.subplots(1, len(attrs), figsize=(5 * len(attrs), 4),
                             squeeze=False)
    for ax, a in zip(axes[0], attrs):
        accs = report.per_domain_accuracy[a]
        xs = range(len(accs))
        ax.bar(list(xs), [v if v is not None else 0.0 for v in accs],
               color="steelblue")
        ax.axhline(report.accuracy, color="firebrick", ls="--", lw=1.0,
                   label=f"overall {report.accuracy:.3f}")
        ax.set_xlabel(f"{a} domain")
        ax.set_ylabel("accuracy")
        ax.set_ylim(0, 1)
        ax.legend(frameon=False)
        ax.set_title(f"{a} ({report.strategy})")
    fig.tight_layout()
    _atomic_savefig(fig, path)


def plot_ablation(rows: list[dict], path) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    names = [r["variant"] for r in rows]
    accs = [r["accuracy"] for r in rows]
    ax.barh(names, accs, color="steelblue")
    ax.set_xlabel("test accuracy")
    ax.set_xlim(0, 1)
    ax.invert_yaxis()
    ax.set_title("ablation grid")
    fig.tight_layout()
    _atomic_savefig(fig, path)


def render_eval_outputs(report: EvalReport, out_dir) -> dict[str, str]:
    """report.json + per_domain.csv + per_domain_accuracy.png."""
    out_dir = Path(out_dir)
    files = {}
    p = out_dir / "report.json"
    atomic_write_text(p, report.to_json() + "\n")
    files["report"] = str(p)
    rows = []
    for a, accs in report.per_domain_accuracy.items():
        for d, acc in enumerate(accs):
            rows.append([a, d, "" if acc is None else f"{acc:.6f}",
                         report.per_domain_counts[a][d]])
    p = out_dir / "per_domain.csv"
    write_csv(p, ["attribute", "domain", "accuracy", "count"], rows)
    files["per_domain"] = str(p)
    p = out_dir / "per_domain_accuracy.png"
    plot_per_domain_accuracy(report, p)
    files["figure"] = str(p)
    return files


def format_report_table(report: EvalReport) -> str:
    """Human-readable summary table."""
    lines = [
        f"strategy        {report.strategy}",
        f"samples         {report.num_samples}",
        f"accuracy        {report.accuracy:.4f}",
        f"rmse            {report.rmse:.4f}",
        f"macro_f1        {report.macro_f1:.4f}",
    ]
    if report.fallback_events:
        lines.append(f"fallbacks       {report.fallback_events}")
    for a, accs in report.per_domain_accuracy.items():
        cells = " ".join("  -  " if v is None else f"{v:.3f}" for v in accs)
        lines.append(f"{a:<15} {cells}")
    return "\n".join(lines)
