"""A small pre-LN transformer with additive adapter injection.

Runs as a bidirectional encoder (MLM objective) or a causal decoder (ARM
objective).  Adapter deltas are added to the affected linear layers'
activations per sample, so one batch can mix samples whose contexts select
different fine-grained modules; base weights are never mutated.

Injection points follow the bank's site map: query and value projections
(coarse + fine) and the feed-forward intermediate projection (coarse only,
by default).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import optim
from .adapters import AdapterBank, BankConfig, CompositionContext, apply_site_plan
from .autodiff import (
    ShapeError,
    Tensor,
    add,
    add_broadcast,
    add_const,
    cross_entropy,
    embedding,
    gather_bs,
    gelu,
    layer_norm,
    matmul,
    mul_const,
    record,
    reshape,
    scale,
    softmax,
    transpose,
)
from .data import Batch, Dataset, collate

NEG_INF = -1e9

SITE_SHORT = {"query": "q", "value": "v", "intermediate": "ff1"}


class ModeError(ValueError):
    """Forward called under the wrong objective mode."""


@dataclass
class BackboneConfig:
    vocab_size: int
    num_classes: int
    num_layers: int = 2
    d_model: int = 64
    num_heads: int = 4
    d_ff: int = 128
    max_seq_len: int = 64
    mode: str = "mlm"                       # "mlm" | "arm"
    coarse_sites: tuple = ("query", "value", "intermediate")
    fine_sites: tuple = ("query", "value")
    dropout: float = 0.0
    # None resolves to "first" for MLM and "last" for ARM (position 0 of a
    # causal model attends only to itself and cannot classify content)
    cls_position: Optional[str] = None
    tie_lm_head: bool = True
    dtype: str = "float64"                  # "float64" | "float32"
    init_std: float = 0.02
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d_model % self.num_heads:
            raise ValueError(
                f"d_model {self.d_model} not divisible by num_heads {self.num_heads}")
        if self.mode not in ("mlm", "arm"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.cls_position is None:
            self.cls_position = "first" if self.mode == "mlm" else "last"
        if self.cls_position not in ("first", "last"):
            raise ValueError(f"unknown cls_position {self.cls_position!r}")
        bad = [s for s in tuple(self.coarse_sites) + tuple(self.fine_sites)
               if s not in SITE_SHORT]
        if bad:
            raise ValueError(f"unknown injection sites {bad}")
        if not set(self.fine_sites) <= set(self.coarse_sites):
            raise ValueError("fine sites must be a subset of coarse sites")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"unknown dtype {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    @property
    def head_dim(self) -> int:
        return self.d_model // self.num_heads


class ModelState:
    """Base weights, optional adapter bank, and output heads.

    Base weights are frozen during PEFT adaptation; forward passes are
    read-only, so concurrent evaluation over a shared state is safe.
    """

    def __init__(self, config: BackboneConfig, params: dict[str, Tensor],
                 bank: Optional[AdapterBank] = None):
        self.config = config
        self.params = params
        self.bank = bank

    HEAD_PREFIX = "head/"

    def base_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.params.items()
                if not n.startswith(self.HEAD_PREFIX)]

    def head_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.params.items()
                if n.startswith(self.HEAD_PREFIX)]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        named = list(self.params.items())
        if self.bank is not None:
            named += self.bank.named_parameters()
        return named

    def adapter_site_dims(self) -> dict[str, tuple[int, int]]:
        cfg = self.config
        dims = {"q": (cfg.d_model, cfg.d_model),
                "v": (cfg.d_model, cfg.d_model),
                "ff1": (cfg.d_model, cfg.d_ff)}
        sites = {}
        for i in range(cfg.num_layers):
            for s in cfg.coarse_sites:
                short = SITE_SHORT[s]
                sites[f"layer{i}/{short}"] = dims[short]
        return sites

    def fine_site_keys(self) -> list[str]:
        cfg = self.config
        return [f"layer{i}/{SITE_SHORT[s]}"
                for i in range(cfg.num_layers) for s in cfg.fine_sites]


def init_model(config: BackboneConfig, seed: int = 0) -> ModelState:
    rng = np.random.default_rng(seed)
    dt = config.np_dtype
    d, f, v = config.d_model, config.d_ff, config.vocab_size

    def w(shape):
        return Tensor(rng.normal(0.0, config.init_std, size=shape),
                      requires_grad=True, dtype=dt)

    def zeros(shape):
        return Tensor(np.zeros(shape), requires_grad=True, dtype=dt)

    def ones(shape):
        return Tensor(np.ones(shape), requires_grad=True, dtype=dt)

    params: dict[str, Tensor] = {
        "embed/tok": w((v, d)),
        "embed/pos": w((config.max_seq_len, d)),
    }
    for i in range(config.num_layers):
        params[f"layer{i}/ln1/gamma"] = ones((d,))
        params[f"layer{i}/ln1/beta"] = zeros((d,))
        for proj in ("q", "k", "v", "o"):
            params[f"layer{i}/{proj}/W"] = w((d, d))
            params[f"layer{i}/{proj}/b"] = zeros((d,))
        params[f"layer{i}/ln2/gamma"] = ones((d,))
        params[f"layer{i}/ln2/beta"] = zeros((d,))
        params[f"layer{i}/ff1/W"] = w((d, f))
        params[f"layer{i}/ff1/b"] = zeros((f,))
        params[f"layer{i}/ff2/W"] = w((f, d))
        params[f"layer{i}/ff2/b"] = zeros((d,))
    params["final/gamma"] = ones((d,))
    params["final/beta"] = zeros((d,))
    params["head/cls/W"] = w((d, config.num_classes))
    params["head/cls/b"] = zeros((config.num_classes,))
    if not config.tie_lm_head:
        params["head/lm/W"] = w((d, v))
        params["head/lm/b"] = zeros((v,))
    for name, t in params.items():
        t.name = name
    return ModelState(config, params)


def attach_bank(state: ModelState, attributes: dict[str, int],
                bank_config: BankConfig, seed: int = 0) -> AdapterBank:
    rng = np.random.default_rng(seed)
    bank = AdapterBank(attributes, state.adapter_site_dims(),
                       state.fine_site_keys(), bank_config, rng,
                       dtype=state.config.np_dtype)
    state.bank = bank
    return bank


def freeze_base(state: ModelState) -> None:
    """PEFT mode: only the bank and the heads keep gradients."""
    for _, t in state.base_parameters():
        t.requires_grad = False
    for _, t in state.head_parameters():
        t.requires_grad = True


# ---------------------------------------------------------------------------
# forward passes


def _linear(x2d: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return add_broadcast(matmul(x2d, w), b)


def _adapted_linear(state: ModelState, x2d: Tensor, site: str,
                    plans: dict, batch: int, seq: int) -> Tensor:
    y = _linear(x2d, state.params[f"{site}/W"], state.params[f"{site}/b"])
    plan = plans.get(site)
    if plan:
        delta = apply_site_plan(x2d, plan, batch, seq)
        if delta is not None:
            y = add(y, delta)
    return y


def _attention_mask(lengths: np.ndarray, seq: int, causal: bool, dtype) -> np.ndarray:
    """Additive mask [B, 1, S, S]: 0 where key visible, NEG_INF elsewhere."""
    b = lengths.shape[0]
    key_ok = np.arange(seq)[None, :] < lengths[:, None]          # [B, S]
    mask = np.where(key_ok[:, None, None, :], 0.0, NEG_INF)
    if causal:
        tri = np.where(np.arange(seq)[None, :] <= np.arange(seq)[:, None], 0.0, NEG_INF)
        mask = mask + tri[None, None, :, :]
        mask = np.maximum(mask, NEG_INF)
    return mask.astype(dtype)


def _dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return mul_const(x, keep)


def _build_plans(state: ModelState, ctxs: Optional[Sequence[CompositionContext]],
                 fallback_counter: Optional[dict] = None) -> dict:
    if state.bank is None or ctxs is None:
        return {}
    return {site: state.bank.site_plan(site, ctxs, fallback_counter)
            for site in state.bank.sites}


def encode(state: ModelState, input_ids: np.ndarray, lengths: np.ndarray,
           ctxs: Optional[Sequence[CompositionContext]] = None,
           fallback_counter: Optional[dict] = None,
           dropout_rng: Optional[np.random.Generator] = None) -> Tensor:
    """Final hidden states [B, S, D] under the configured objective mode."""
    cfg = state.config
    b, s = input_ids.shape
    if s > cfg.max_seq_len:
        raise ShapeError(f"sequence length {s} exceeds max_seq_len {cfg.max_seq_len}")
    if ctxs is not None and len(ctxs) != b:
        raise ValueError(f"{len(ctxs)} contexts for a batch of {b}")
    plans = _build_plans(state, ctxs, fallback_counter)
    p = state.params
    dh = cfg.head_dim
    inv_sqrt_dh = 1.0 / math.sqrt(dh)

    tok = embedding(p["embed/tok"], input_ids)
    pos = embedding(p["embed/pos"], np.arange(s))
    h = add_broadcast(tok, pos)
    h = _dropout(h, cfg.dropout, dropout_rng)
    mask = _attention_mask(lengths, s, causal=(cfg.mode == "arm"), dtype=cfg.np_dtype)

    for i in range(cfg.num_layers):
        x = layer_norm(h, p[f"layer{i}/ln1/gamma"], p[f"layer{i}/ln1/beta"], cfg.ln_eps)
        x2 = reshape(x, (b * s, cfg.d_model))
        q = _adapted_linear(state, x2, f"layer{i}/q", plans, b, s)
        k = _linear(x2, p[f"layer{i}/k/W"], p[f"layer{i}/k/b"])
        v = _adapted_linear(state, x2, f"layer{i}/v", plans, b, s)
        qh = transpose(reshape(q, (b, s, cfg.num_heads, dh)), (0, 2, 1, 3))
        kh = transpose(reshape(k, (b, s, cfg.num_heads, dh)), (0, 2, 1, 3))
        vh = transpose(reshape(v, (b, s, cfg.num_heads, dh)), (0, 2, 1, 3))
        scores = scale(matmul(qh, transpose(kh, (0, 1, 3, 2))), inv_sqrt_dh)
        scores = add_const(scores, mask)
        probs = softmax(scores)
        probs = _dropout(probs, cfg.dropout, dropout_rng)
        ctx = matmul(probs, vh)
        merged = reshape(transpose(ctx, (0, 2, 1, 3)), (b * s, cfg.d_model))
        attn_out = _linear(merged, p[f"layer{i}/o/W"], p[f"layer{i}/o/b"])
        h = add(h, reshape(attn_out, (b, s, cfg.d_model)))

        x = layer_norm(h, p[f"layer{i}/ln2/gamma"], p[f"layer{i}/ln2/beta"], cfg.ln_eps)
        x2 = reshape(x, (b * s, cfg.d_model))
        f1 = gelu(_adapted_linear(state, x2, f"layer{i}/ff1", plans, b, s))
        f2 = _linear(f1, p[f"layer{i}/ff2/W"], p[f"layer{i}/ff2/b"])
        f2 = _dropout(f2, cfg.dropout, dropout_rng)
        h = add(h, reshape(f2, (b, s, cfg.d_model)))

    return layer_norm(h, p["final/gamma"], p["final/beta"], cfg.ln_eps)


def lm_logits(state: ModelState, hidden2d: Tensor) -> Tensor:
    """Project hidden rows to vocabulary logits (tied or untied head)."""
    if state.config.tie_lm_head:
        return matmul(hidden2d, transpose(state.params["embed/tok"], (1, 0)))
    return _linear(hidden2d, state.params["head/lm/W"], state.params["head/lm/b"])


def classify_from_hidden(state: ModelState, h: Tensor, lengths: np.ndarray) -> Tensor:
    b = h.shape[0]
    if state.config.cls_position == "first":
        pos = np.zeros(b, dtype=np.int64)
    else:
        pos = lengths - 1
    pooled = gather_bs(h, np.arange(b), pos)
    return _linear(pooled, state.params["head/cls/W"], state.params["head/cls/b"])


def forward_classify(state: ModelState, batch: Batch,
                     ctxs: Optional[Sequence[CompositionContext]] = None,
                     fallback_counter: Optional[dict] = None,
                     dropout_rng: Optional[np.random.Generator] = None) -> Tensor:
    """Class logits [B, num_classes] read at the anchor position."""
    h = encode(state, batch.input_ids, batch.lengths, ctxs,
               fallback_counter, dropout_rng)
    return classify_from_hidden(state, h, batch.lengths)


def forward_mlm(state: ModelState, batch: Batch,
                ctxs: Optional[Sequence[CompositionContext]] = None,
                fallback_counter: Optional[dict] = None,
                dropout_rng: Optional[np.random.Generator] = None) -> Tensor:
    """Token logits [M, V] at the batch's masked positions."""
    if state.config.mode != "mlm":
        raise ModeError(f"forward_mlm on a {state.config.mode!r} model")
    if batch.gen_b is None:
        raise ValueError("batch was collated without generation targets")
    h = encode(state, batch.input_ids, batch.lengths, ctxs,
               fallback_counter, dropout_rng)
    if batch.gen_b.size == 0:
        return Tensor(np.zeros((0, state.config.vocab_size)),
                      dtype=state.config.np_dtype)
    hm = gather_bs(h, batch.gen_b, batch.gen_s)
    return lm_logits(state, hm)


def forward_arm(state: ModelState, batch: Batch,
                ctxs: Optional[Sequence[CompositionContext]] = None,
                fallback_counter: Optional[dict] = None,
                dropout_rng: Optional[np.random.Generator] = None) -> Tensor:
    """Next-token logits [B, S, V]; position t sees only tokens <= t."""
    if state.config.mode != "arm":
        raise ModeError(f"forward_arm on a {state.config.mode!r} model")
    h = encode(state, batch.input_ids, batch.lengths, ctxs,
               fallback_counter, dropout_rng)
    b, s = batch.input_ids.shape
    flat = lm_logits(state, reshape(h, (b * s, state.config.d_model)))
    return reshape(flat, (b, s, state.config.vocab_size))


def generation_loss(state: ModelState, h: Tensor, batch: Batch) -> Tensor:
    """Cross-entropy at the batch's scored generation positions."""
    if batch.gen_b is None:
        raise ValueError("batch was collated without generation targets")
    if batch.gen_b.size == 0:
        return Tensor(np.zeros(()), dtype=state.config.np_dtype)
    hm = gather_bs(h, batch.gen_b, batch.gen_s)
    return cross_entropy(lm_logits(state, hm), batch.gen_targets)


# ---------------------------------------------------------------------------
# base pretraining (the stand-in for a pretrained backbone)


def pretrain_base(config: BackboneConfig, corpus: Dataset, steps: int, *,
                  lr: float = 1e-3, batch_size: int = 32, seed: int = 0,
                  mask_ratio: float = 0.15, clip_norm: float = 2.0,
                  weight_decay: float = 0.0) -> tuple[ModelState, list[float]]:
    """Train a fresh backbone on the corpus with its LM objective only.

    The classifier head is left at its random initialization; the returned
    state is the frozen "pretrained" base for adapter experiments.
    """
    if len(corpus) == 0:
        raise ValueError("pretraining corpus is empty")
    state = init_model(config, seed=seed)
    rng = np.random.default_rng(seed + 1)
    trainable = state.base_parameters()
    opt = optim.AdamW(trainable, lr=lr, clip_norm=clip_norm,
                      weight_decay=weight_decay)
    history: list[float] = []
    n = len(corpus.samples)
    for _ in range(steps):
        idx = rng.choice(n, size=min(batch_size, n), replace=False)
        batch = collate([corpus.samples[j] for j in idx], config.mode,
                        mask_ratio=mask_ratio, rng=rng)
        if batch.gen_b.size == 0:
            continue
        with record() as tape:
            h = encode(state, batch.input_ids, batch.lengths, dropout_rng=rng
                       if config.dropout > 0 else None)
            loss = generation_loss(state, h, batch)
        grads = tape.backward(loss)
        opt.step({name: grads.get(t) for name, t in trainable})
        history.append(loss.item())
    return state, history
