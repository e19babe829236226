"""Multitask loss, joint learning with distillation, and module separation.

Two compositions of the same network are trained together: the fine-grained
model (coarse + per-domain modules per attribute) and the general model
(coarse + alignment module c').  The joint objective per batch is

    L_mtl(fine) + coarse_coeff * L_mtl(general) + kl_weight * KL(fine, general)

where each L_mtl is classification cross-entropy plus alpha times the
generation (MLM/ARM) cross-entropy.  When the fine model early-stops on dev
accuracy, the separation phase continues training the general objective
with only the c' group receiving updates.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .adapters import ALIGN, COARSE, CompositionContext, MODE_FINE, build_context
from .autodiff import (
    Tensor,
    add,
    cross_entropy,
    kl_divergence,
    record,
    scale,
    stop_gradient,
    take_rows,
)
from .data import Batch, Dataset, Sample, collate
from .evaluate import accuracy_on
from .model import (
    ModelState,
    classify_from_hidden,
    encode,
    freeze_base,
    generation_loss,
)
from .optim import AdamW

PHASE_JOINT = "joint"
PHASE_SEPARATION = "separation"

_IMPROVE_EPS = 1e-12


class PhaseError(RuntimeError):
    """Operation invoked in the wrong training phase."""


@dataclass
class TrainConfig:
    alpha: float = 0.5                 # text-generation loss coefficient
    coarse_coeff: float = 0.5          # weight on the general model's mtl loss
    kl_weight: float = 1.0
    kl_stop_gradient: bool = False     # frozen-teacher distillation switch
    lr: float = 3e-4
    clip_norm: float = 2.0
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 20
    separation_max_epochs: int = 10
    patience: int = 3
    mask_ratio: float = 0.15
    bert_style_masking: bool = False
    # with alpha 0 the reconstruction task disappears entirely (inputs stay
    # clean); this switch keeps the 15% masking corruption without the loss,
    # the "remove generation, keep masking" ablation
    mask_without_loss: bool = False
    unlabeled_mix: bool = False
    seed: int = 0
    # restrict the fine model's views per attribute ("c"/"f" kinds); None = both
    nn_view_spec: Optional[dict[str, list[str]]] = None

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if self.clip_norm <= 0:
            raise ValueError("gradient clip must be positive")


def build_view_context(attributes: dict[str, int], sample_attrs: dict[str, int],
                       view_spec: Optional[dict[str, list[str]]] = None
                       ) -> CompositionContext:
    """Fine-model context, optionally with granularities removed per attribute."""
    slots: list[tuple[str, object]] = []
    for a in attributes:
        kinds = tuple(view_spec.get(a, ("c", "f"))) if view_spec else ("c", "f")
        for kind in kinds:
            if kind == "c":
                slots.append((a, COARSE))
            elif kind == "f":
                slots.append((a, int(sample_attrs[a])))
            else:
                raise ValueError(f"unknown view kind {kind!r}")
    if not slots:
        raise ValueError("view spec removed every slot")
    w = 1.0 / len(slots)
    return CompositionContext(mode=MODE_FINE, entries=[(a, t, w) for a, t in slots])


def mtl_loss(state: ModelState, batch: Batch, ctxs, alpha: float,
             dropout_rng: Optional[np.random.Generator] = None
             ) -> tuple[Tensor, dict]:
    """Classification loss plus alpha times the generation loss.

    Unlabeled samples (label -1) are excluded from the classification term
    and contribute through the generation term only.  Returns the scalar
    loss and an aux dict carrying the term values and the class logits.
    """
    h = encode(state, batch.input_ids, batch.lengths, ctxs, dropout_rng=dropout_rng)
    cls_logits = classify_from_hidden(state, h, batch.lengths)
    labeled = np.nonzero(batch.labels >= 0)[0]
    if labeled.size == batch.size:
        cls = cross_entropy(cls_logits, batch.labels)
    elif labeled.size:
        cls = cross_entropy(take_rows(cls_logits, labeled), batch.labels[labeled])
    else:
        cls = Tensor(np.zeros(()), dtype=state.config.np_dtype)
    aux = {"cls_loss": cls.item(), "gen_loss": None, "cls_logits": cls_logits}
    if alpha != 0.0:
        gen = generation_loss(state, h, batch)
        aux["gen_loss"] = gen.item()
        total = add(cls, scale(gen, alpha)) if alpha != 1.0 else add(cls, gen)
    else:
        total = cls
    return total, aux


class JointState:
    """Shared model plus the four parameter groups and phase bookkeeping."""

    def __init__(self, model: ModelState, tconfig: TrainConfig):
        if model.bank is None:
            raise ValueError("joint training needs an adapter bank")
        self.model = model
        self.tconfig = tconfig
        self.attributes = model.bank.attributes
        bank_groups = model.bank.parameter_groups()
        self.groups: dict[str, list[tuple[str, Tensor]]] = {
            "coarse": bank_groups["coarse"],
            "cprime": bank_groups["cprime"],
            "fine": bank_groups["fine"],
            "heads": model.head_parameters(),
        }
        self.phase = PHASE_JOINT
        self.nn_converged = False
        self.step = 0
        self.step_log: list[dict] = []
        self.epoch_history: list[dict] = []
        self.separation_summary: Optional[dict] = None
        seq = np.random.SeedSequence(tconfig.seed).spawn(3)
        self.shuffle_rng = np.random.default_rng(seq[0])
        self.mask_rng = np.random.default_rng(seq[1])
        self.misc_rng = np.random.default_rng(seq[2])
        freeze_base(model)
        self.optimizer = self._make_optimizer(
            self.groups["coarse"] + self.groups["cprime"]
            + self.groups["fine"] + self.groups["heads"])

    def _make_optimizer(self, params: list[tuple[str, Tensor]]) -> AdamW:
        t = self.tconfig
        return AdamW(params, lr=t.lr, betas=t.betas, eps=t.adam_eps,
                     weight_decay=t.weight_decay, clip_norm=t.clip_norm)

    def trainable(self) -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        for g in ("coarse", "cprime", "fine", "heads"):
            out += self.groups[g]
        return out

    def nn_contexts(self, batch: Batch) -> list[CompositionContext]:
        spec = self.tconfig.nn_view_spec
        return [build_view_context(self.attributes,
                                   {a: int(batch.attrs[a][i]) for a in self.attributes},
                                   spec)
                for i in range(batch.size)]

    def general_contexts(self, batch: Batch) -> list[CompositionContext]:
        ctx = build_context(self.attributes, "general")
        return [ctx] * batch.size


def _training_step(jstate: JointState, batch: Batch) -> dict:
    t = jstate.tconfig
    model = jstate.model
    with record() as tape:
        loss_nn, aux_nn = mtl_loss(model, batch, jstate.nn_contexts(batch), t.alpha)
        parts = {"cls_nn": aux_nn["cls_loss"], "gen_nn": aux_nn["gen_loss"],
                 "cls_general": None, "gen_general": None, "kl": None}
        total = loss_nn
        if t.coarse_coeff != 0.0 or t.kl_weight != 0.0:
            loss_gen, aux_gen = mtl_loss(model, batch,
                                         jstate.general_contexts(batch), t.alpha)
            parts["cls_general"] = aux_gen["cls_loss"]
            parts["gen_general"] = aux_gen["gen_loss"]
            if t.coarse_coeff != 0.0:
                total = add(total, scale(loss_gen, t.coarse_coeff)
                            if t.coarse_coeff != 1.0 else loss_gen)
            if t.kl_weight != 0.0:
                ref = aux_nn["cls_logits"]
                if t.kl_stop_gradient:
                    ref = stop_gradient(ref)
                kl = kl_divergence(ref, aux_gen["cls_logits"])
                parts["kl"] = kl.item()
                total = add(total, scale(kl, t.kl_weight)
                            if t.kl_weight != 1.0 else kl)
    grads = tape.backward(total)
    named = {name: grads.get(tensor) for name, tensor in jstate.optimizer.params}
    norm = jstate.optimizer.step(named)
    jstate.step += 1
    rec = {"step": jstate.step, "phase": jstate.phase,
           "total": total.item(), "grad_norm": norm, **parts}
    jstate.step_log.append(rec)
    return rec


def joint_step(jstate: JointState, batch: Batch) -> dict:
    """One optimizer update of the full joint objective (JOINT phase only)."""
    if jstate.phase != PHASE_JOINT:
        raise PhaseError(f"joint_step in phase {jstate.phase!r}")
    return _training_step(jstate, batch)


def _epoch_pool(jstate: JointState, train: Dataset,
                unlabeled: Optional[Dataset]) -> list[Sample]:
    pool = list(train.samples)
    if jstate.tconfig.unlabeled_mix and unlabeled is not None:
        pool += list(unlabeled.samples)
    order = np.arange(len(pool))
    jstate.shuffle_rng.shuffle(order)
    return [pool[i] for i in order]


def train_epoch(jstate: JointState, train: Dataset,
                unlabeled: Optional[Dataset] = None) -> float:
    """One pass over the (shuffled) pool; returns the mean total loss."""
    t = jstate.tconfig
    pool = _epoch_pool(jstate, train, unlabeled)
    mode = jstate.model.config.mode
    with_generation = t.alpha != 0.0 or t.mask_without_loss
    totals = []
    for i in range(0, len(pool), t.batch_size):
        chunk = pool[i:i + t.batch_size]
        batch = collate(chunk, mode, mask_ratio=t.mask_ratio, rng=jstate.mask_rng,
                        bert_style=t.bert_style_masking,
                        vocab_size=jstate.model.config.vocab_size,
                        with_generation=with_generation)
        rec = _training_step(jstate, batch)
        totals.append(rec["total"])
    return float(np.mean(totals)) if totals else 0.0


def snapshot_params(named: list[tuple[str, Tensor]]) -> dict[str, np.ndarray]:
    return {n: t.data.copy() for n, t in named}


def restore_params(named: list[tuple[str, Tensor]],
                   snap: dict[str, np.ndarray]) -> None:
    for n, t in named:
        t.data = snap[n].copy()


def group_checksum(named: list[tuple[str, Tensor]]) -> str:
    """Order-independent digest over parameter names and raw bytes."""
    h = hashlib.sha256()
    for n, t in sorted(named, key=lambda item: item[0]):
        h.update(n.encode())
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()


def train_joint(model: ModelState, train: Dataset, dev: Dataset,
                tconfig: TrainConfig, unlabeled: Optional[Dataset] = None,
                run_separation: bool = True) -> JointState:
    """Full schedule: joint phase to NN convergence, then module separation.

    Early stopping tracks the fine model's dev accuracy with best-state
    restoration; exhausting max_epochs also counts as convergence.
    """
    jstate = JointState(model, tconfig)
    trainable = jstate.trainable()
    best_acc = -1.0
    best_snap = snapshot_params(trainable)
    bad = 0
    for epoch in range(1, tconfig.max_epochs + 1):
        mean_loss = train_epoch(jstate, train, unlabeled)
        acc_fine = accuracy_on(model, dev.samples, "fine")
        acc_general = accuracy_on(model, dev.samples, "general")
        jstate.epoch_history.append({
            "epoch": epoch, "phase": PHASE_JOINT, "train_loss": mean_loss,
            "dev_acc_fine": acc_fine, "dev_acc_general": acc_general})
        if acc_fine > best_acc + _IMPROVE_EPS:
            best_acc = acc_fine
            best_snap = snapshot_params(trainable)
            bad = 0
        else:
            bad += 1
            if bad >= tconfig.patience:
                break
    restore_params(trainable, best_snap)
    jstate.nn_converged = True
    if run_separation:
        separation_phase(jstate, train, dev, unlabeled)
    return jstate


def separation_phase(jstate: JointState, train: Dataset, dev: Dataset,
                     unlabeled: Optional[Dataset] = None) -> JointState:
    """Continue the general model with only the c' group updating.

    The coarse, fine, and head groups are frozen bit-exactly (removed from
    the optimizer, requires_grad off).  c' is restored to its best general
    dev accuracy, which by construction is >= the accuracy at phase entry.
    """
    if not jstate.nn_converged:
        raise PhaseError("separation_phase before the fine model converged")
    t = jstate.tconfig
    model = jstate.model
    for g in ("coarse", "fine", "heads"):
        for _, tensor in jstate.groups[g]:
            tensor.requires_grad = False
    jstate.phase = PHASE_SEPARATION
    jstate.optimizer = jstate._make_optimizer(jstate.groups["cprime"])
    entry_acc = accuracy_on(model, dev.samples, "general")
    best_acc = entry_acc
    best_snap = snapshot_params(jstate.groups["cprime"])
    strict_best = entry_acc
    bad = 0
    for epoch in range(1, t.separation_max_epochs + 1):
        mean_loss = train_epoch(jstate, train, unlabeled)
        acc_general = accuracy_on(model, dev.samples, "general")
        jstate.epoch_history.append({
            "epoch": epoch, "phase": PHASE_SEPARATION, "train_loss": mean_loss,
            "dev_acc_fine": None, "dev_acc_general": acc_general})
        # ties prefer the later state: c' keeps moving as long as the general
        # model's dev accuracy has not dropped below its running best
        if acc_general >= best_acc:
            best_acc = acc_general
            best_snap = snapshot_params(jstate.groups["cprime"])
        if acc_general > strict_best + _IMPROVE_EPS:
            strict_best = acc_general
            bad = 0
        else:
            bad += 1
            if bad >= t.patience:
                break
    restore_params(jstate.groups["cprime"], best_snap)
    jstate.separation_summary = {
        "entry_general_acc": entry_acc,
        "end_general_acc": best_acc,
    }
    return jstate
