"""Prediction under every composition strategy, plus the three task metrics.

Strategies (per sample, per attribute):
  fine     coarse + the sample's own fine-grained module
  general  coarse + alignment module (the jointly distilled general model)
  avg      alignment + the mean of all of the attribute's fine modules
  rand     alignment + one uniformly drawn fine module
  coarse   coarse modules only

All evaluation is read-only over the model state.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .adapters import (
    COARSE,
    MODE_FINE,
    MODE_RAND,
    MODES,
    CompositionContext,
    build_context,
)
from .autodiff import softmax
from .data import Dataset, Sample, collate
from .model import ModelState, forward_classify

STRATEGIES = MODES


@dataclass
class EvalReport:
    accuracy: float
    rmse: float
    macro_f1: float
    per_domain_accuracy: dict[str, list[Optional[float]]]
    per_domain_counts: dict[str, list[int]]
    strategy: str
    seed: Optional[int]
    num_samples: int
    fallback_events: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "rmse": self.rmse,
            "macro_f1": self.macro_f1,
            "per_domain_accuracy": self.per_domain_accuracy,
            "per_domain_counts": self.per_domain_counts,
            "strategy": self.strategy,
            "seed": self.seed,
            "num_samples": self.num_samples,
            "fallback_events": self.fallback_events,
            **({"extra": self.extra} if self.extra else {}),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def metrics(gold, predictions) -> tuple[float, float, float]:
    """(accuracy, rmse, macro F1) over ordinal class indices.

    Macro F1 averages per-class F1 over the classes that occur in gold or
    predictions; classes absent from both are not scored.
    """
    gold = np.asarray(gold, dtype=np.int64)
    pred = np.asarray(predictions, dtype=np.int64)
    if gold.shape != pred.shape or gold.ndim != 1:
        raise ValueError(f"label arrays disagree: {gold.shape} vs {pred.shape}")
    if gold.size == 0:
        raise ValueError("metrics need at least one sample")
    acc = float((gold == pred).mean())
    rmse = float(np.sqrt(((gold - pred) ** 2).mean()))
    f1s = []
    for c in np.union1d(gold, pred):
        tp = int(((gold == c) & (pred == c)).sum())
        fp = int(((gold != c) & (pred == c)).sum())
        fn = int(((gold == c) & (pred != c)).sum())
        denom = 2 * tp + fp + fn
        f1s.append(2.0 * tp / denom if denom else 0.0)
    return acc, rmse, float(np.mean(f1s))


def _batches(samples: list[Sample], batch_size: int):
    for i in range(0, len(samples), batch_size):
        yield samples[i:i + batch_size]


def _contexts(attributes: dict[str, int], batch_samples: list[Sample], mode: str,
              rng: Optional[np.random.Generator]):
    return [build_context(attributes, mode,
                          sample_attrs=s.attrs if mode == MODE_FINE else None,
                          rng=rng)
            for s in batch_samples]


def fused_logits(state: ModelState, samples: list[Sample], mode: str, *,
                 batch_size: int = 64, rng: Optional[np.random.Generator] = None,
                 fallback_counter: Optional[dict] = None) -> np.ndarray:
    """Class logits under the fused (weight-space averaged) composition."""
    if mode not in STRATEGIES:
        raise ValueError(f"unknown strategy {mode!r}; expected one of {STRATEGIES}")
    if state.bank is None:
        raise ValueError("model has no adapter bank attached")
    if mode == MODE_RAND and rng is None:
        raise ValueError("rand strategy needs an rng")
    attributes = state.bank.attributes
    out = []
    for chunk in _batches(samples, batch_size):
        batch = collate(chunk, state.config.mode, with_generation=False)
        ctxs = _contexts(attributes, chunk, mode, rng)
        logits = forward_classify(state, batch, ctxs,
                                  fallback_counter=fallback_counter)
        out.append(logits.data)
    return np.concatenate(out, axis=0)


def predict_fused(state: ModelState, samples: list[Sample], mode: str, *,
                  batch_size: int = 64, rng: Optional[np.random.Generator] = None,
                  fallback_counter: Optional[dict] = None) -> np.ndarray:
    """Argmax class predictions under a composition strategy."""
    logits = fused_logits(state, samples, mode, batch_size=batch_size, rng=rng,
                          fallback_counter=fallback_counter)
    return logits.argmax(axis=1)


def predict_with_contexts(state: ModelState, samples: list[Sample], ctx_fn, *,
                          batch_size: int = 64,
                          fallback_counter: Optional[dict] = None) -> np.ndarray:
    """Argmax predictions under a caller-supplied per-sample context builder."""
    out = []
    for chunk in _batches(samples, batch_size):
        batch = collate(chunk, state.config.mode, with_generation=False)
        ctxs = [ctx_fn(s) for s in chunk]
        logits = forward_classify(state, batch, ctxs,
                                  fallback_counter=fallback_counter)
        out.append(logits.data.argmax(axis=1))
    return np.concatenate(out, axis=0)


def predict_ensemble(state: ModelState, samples: list[Sample], *,
                     batch_size: int = 64,
                     fallback_counter: Optional[dict] = None) -> np.ndarray:
    """Probability-space average over the single-view models.

    Each (attribute, granularity) view applies its module at full weight,
    the Monte-Carlo reading of posterior sampling; the mean of the views'
    softmax outputs is returned, shape [N, num_classes].
    """
    if state.bank is None:
        raise ValueError("model has no adapter bank attached")
    attributes = state.bank.attributes
    out = []
    for chunk in _batches(samples, batch_size):
        batch = collate(chunk, state.config.mode, with_generation=False)
        view_probs = []
        for a in attributes:
            for tag_of in (lambda s, a=a: COARSE, lambda s, a=a: s.attrs[a]):
                ctxs = [CompositionContext(mode=MODE_FINE,
                                           entries=[(a, tag_of(s), 1.0)])
                        for s in chunk]
                logits = forward_classify(state, batch, ctxs,
                                          fallback_counter=fallback_counter)
                view_probs.append(softmax(logits).data)
        out.append(np.mean(np.stack(view_probs, axis=0), axis=0))
    return np.concatenate(out, axis=0)


def evaluate_model(state: ModelState, dataset: Dataset, strategy: str, *,
                   batch_size: int = 64, seed: Optional[int] = None) -> EvalReport:
    """Full report: overall metrics plus the per-attribute domain table."""
    labeled = [s for s in dataset.samples if s.label is not None]
    if not labeled:
        raise ValueError("dataset has no labeled samples to evaluate")
    rng = np.random.default_rng(seed) if seed is not None else None
    counter: dict = {}
    preds = predict_fused(state, labeled, strategy, batch_size=batch_size,
                          rng=rng, fallback_counter=counter)
    gold = np.array([s.label for s in labeled], dtype=np.int64)
    acc, rmse, f1 = metrics(gold, preds)
    per_acc: dict[str, list[Optional[float]]] = {}
    per_cnt: dict[str, list[int]] = {}
    for a, n_dom in dataset.schema.attributes.items():
        doms = np.array([s.attrs[a] for s in labeled], dtype=np.int64)
        accs: list[Optional[float]] = []
        cnts: list[int] = []
        for d in range(n_dom):
            m = doms == d
            cnts.append(int(m.sum()))
            accs.append(float((gold[m] == preds[m]).mean()) if m.any() else None)
        per_acc[a] = accs
        per_cnt[a] = cnts
    return EvalReport(accuracy=acc, rmse=rmse, macro_f1=f1,
                      per_domain_accuracy=per_acc, per_domain_counts=per_cnt,
                      strategy=strategy, seed=seed, num_samples=len(labeled),
                      fallback_events=counter.get("unseen_domain", 0))


def accuracy_on(state: ModelState, samples: list[Sample], strategy: str, *,
                batch_size: int = 64, rng: Optional[np.random.Generator] = None
                ) -> float:
    """Plain accuracy, the early-stopping signal during training."""
    labeled = [s for s in samples if s.label is not None]
    preds = predict_fused(state, labeled, strategy, batch_size=batch_size, rng=rng)
    gold = np.array([s.label for s in labeled], dtype=np.int64)
    return float((gold == preds).mean())
