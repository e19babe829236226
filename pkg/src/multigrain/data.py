"""Attribute-annotated datasets, masking, and the synthetic non-IID generator.

A sample is a token sequence, a class label, and one fine-grained domain id
per attribute (its partition assignments).  The generator produces
heterogeneous data with two knobs: per-domain vocabulary skew (domains
prefer their own marker tokens) and per-domain label bias (each domain
shifts the base label by a fixed offset with a configurable probability).
The base label itself is encoded in the text through class-marker tokens so
that it stays inferable when the knobs are at zero.

Token id layout: 0 = padding, 1 = the classification anchor (CLS/BOS),
2 = mask, content ids from 3 up.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

PAD_ID = 0
ANCHOR_ID = 1
MASK_ID = 2
FIRST_CONTENT_ID = 3

FORMAT_VERSION = 1


class DatasetError(ValueError):
    """Malformed dataset file or record."""


@dataclass
class AttributeSchema:
    """Ordered attribute names with their fine-grained domain counts."""

    attributes: dict[str, int]

    def __post_init__(self):
        if not self.attributes:
            raise DatasetError("schema needs at least one attribute")
        for name, n in self.attributes.items():
            if n < 1:
                raise DatasetError(f"attribute {name!r} needs >= 1 domain, got {n}")

    @property
    def names(self) -> list[str]:
        return list(self.attributes)

    def domain_count(self, attribute: str) -> int:
        if attribute not in self.attributes:
            raise KeyError(f"unknown attribute {attribute!r}")
        return self.attributes[attribute]


@dataclass
class Sample:
    tokens: list[int]
    label: Optional[int]
    attrs: dict[str, int]


@dataclass
class Dataset:
    schema: AttributeSchema
    vocab_size: int
    num_classes: int
    samples: list[Sample]

    def __len__(self) -> int:
        return len(self.samples)


def partition(sample: Sample, attribute: str) -> int:
    """The sample's fine-grained domain under the given attribute view."""
    if attribute not in sample.attrs:
        raise KeyError(f"sample has no attribute {attribute!r}")
    return sample.attrs[attribute]


def mask_tokens(tokens: list[int], ratio: float, rng: np.random.Generator,
                bert_style: bool = False, vocab_size: Optional[int] = None
                ) -> tuple[list[int], list[int], list[int]]:
    """Replace round(ratio * len) positions with the mask id.

    Operates on content tokens only; the classification anchor is prepended
    afterwards, so it can never be masked.  Returns (masked tokens, chosen
    positions, original tokens at those positions).  With bert_style on, 80%
    of chosen positions become MASK, 10% a random content token, 10% stay.
    """
    if not tokens:
        raise ValueError("cannot mask an empty sequence")
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"mask ratio {ratio} outside (0, 1]")
    n = len(tokens)
    count = int(np.floor(ratio * n + 0.5))  # round half up
    if count == 0:
        return list(tokens), [], []
    positions = sorted(int(p) for p in rng.choice(n, size=count, replace=False))
    masked = list(tokens)
    originals = [tokens[p] for p in positions]
    for p in positions:
        if bert_style:
            roll = rng.random()
            if roll < 0.8:
                masked[p] = MASK_ID
            elif roll < 0.9:
                if vocab_size is None:
                    raise ValueError("bert_style masking needs vocab_size")
                masked[p] = int(rng.integers(FIRST_CONTENT_ID, vocab_size))
            # else keep the original token
        else:
            masked[p] = MASK_ID
    return masked, positions, originals


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass
class SyntheticConfig:
    """Knobs for the synthetic heterogeneous corpus.

    vocab_skew: probability a token comes from one of the sample's domain
    distributions instead of the label-conditioned global one.
    label_bias: probability each domain's label offset is applied.
    """

    attributes: dict[str, int] = field(default_factory=lambda: {"user": 8, "item": 8})
    num_classes: int = 5
    vocab_skew: float = 0.5
    label_bias: float = 0.7
    max_offset: int = 1
    samples_per_domain: int = 160
    dev_per_domain: int = 40
    test_per_domain: int = 60
    unlabeled_per_domain: int = 0
    seq_len: tuple[int, int] = (16, 32)
    class_marker_tokens: int = 4
    domain_marker_tokens: int = 4
    offset_marker_tokens: int = 4
    filler_tokens: int = 32
    class_token_rate: float = 0.5
    # share of a domain's tokens drawn from its offset cluster instead of its
    # own markers: domains with the same label bias share writing style
    offset_vocab_rate: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not self.attributes:
            raise ValueError("need at least one attribute")
        for knob in ("vocab_skew", "label_bias", "class_token_rate"):
            v = getattr(self, knob)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{knob} {v} outside [0, 1]")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.samples_per_domain < 1:
            raise ValueError("samples_per_domain must be positive")
        if self.seq_len[0] < 1 or self.seq_len[1] < self.seq_len[0]:
            raise ValueError(f"bad seq_len range {self.seq_len}")

    @property
    def total_domains(self) -> int:
        return sum(self.attributes.values())

    @property
    def num_offset_values(self) -> int:
        return 2 * self.max_offset

    @property
    def vocab_size(self) -> int:
        return (FIRST_CONTENT_ID
                + self.num_classes * self.class_marker_tokens
                + self.total_domains * self.domain_marker_tokens
                + self.num_offset_values * self.offset_marker_tokens
                + self.filler_tokens)

    def class_marker_range(self, label: int) -> tuple[int, int]:
        start = FIRST_CONTENT_ID + label * self.class_marker_tokens
        return start, start + self.class_marker_tokens

    def domain_marker_range(self, attr_index: int, domain: int) -> tuple[int, int]:
        counts = list(self.attributes.values())
        prior = sum(counts[:attr_index]) + domain
        start = (FIRST_CONTENT_ID + self.num_classes * self.class_marker_tokens
                 + prior * self.domain_marker_tokens)
        return start, start + self.domain_marker_tokens

    def offset_marker_range(self, offset: int) -> tuple[int, int]:
        if offset == 0 or abs(offset) > self.max_offset:
            raise ValueError(f"offset {offset} outside the nonzero +-{self.max_offset} range")
        idx = 2 * (abs(offset) - 1) + (0 if offset > 0 else 1)
        start = (FIRST_CONTENT_ID + self.num_classes * self.class_marker_tokens
                 + self.total_domains * self.domain_marker_tokens
                 + idx * self.offset_marker_tokens)
        return start, start + self.offset_marker_tokens

    def filler_range(self) -> tuple[int, int]:
        start = (FIRST_CONTENT_ID + self.num_classes * self.class_marker_tokens
                 + self.total_domains * self.domain_marker_tokens
                 + self.num_offset_values * self.offset_marker_tokens)
        return start, start + self.filler_tokens


@dataclass
class DatasetSplits:
    train: Dataset
    dev: Dataset
    test: Dataset
    unlabeled: Optional[Dataset] = None


def shifted_label(base: int, shifts: list[int], num_classes: int) -> int:
    """Base label plus applied domain offsets, clamped to the class range."""
    return int(np.clip(base + sum(shifts), 0, num_classes - 1))


def sample_domain_offsets(config: SyntheticConfig, rng: np.random.Generator
                          ) -> dict[tuple[str, int], int]:
    """One nonzero integer offset per (attribute, domain), sampled once.

    The offset multiset per attribute is sign-balanced (a shuffled cycle of
    +1, -1, ..., +max, -max), so the population-average shift of an
    attribute's domains is as close to zero as the domain count allows.
    """
    magnitudes = [s * k for k in range(1, config.max_offset + 1) for s in (1, -1)]
    offsets = {}
    for a, n_dom in config.attributes.items():
        pool = np.array([magnitudes[i % len(magnitudes)] for i in range(n_dom)])
        rng.shuffle(pool)
        for s in range(n_dom):
            offsets[(a, s)] = int(pool[s])
    return offsets


def _domain_assignments(n: int, n_dom: int, rng: np.random.Generator) -> np.ndarray:
    """Near-balanced assignment covering every domain (round-robin, shuffled)."""
    reps = int(np.ceil(n / n_dom))
    seq = np.tile(np.arange(n_dom), reps)[:n]
    rng.shuffle(seq)
    return seq


def _draw_tokens(config: SyntheticConfig, base: int, doms: dict[str, int],
                 offsets: dict[tuple[str, int], int],
                 rng: np.random.Generator) -> list[int]:
    length = int(rng.integers(config.seq_len[0], config.seq_len[1] + 1))
    attr_names = list(config.attributes)
    fill_lo, fill_hi = config.filler_range()
    cls_lo, cls_hi = config.class_marker_range(base)
    tokens = []
    for _ in range(length):
        if rng.random() < config.vocab_skew:
            ai = int(rng.integers(len(attr_names)))
            dom = doms[attr_names[ai]]
            if rng.random() < config.offset_vocab_rate:
                lo, hi = config.offset_marker_range(offsets[(attr_names[ai], dom)])
            else:
                lo, hi = config.domain_marker_range(ai, dom)
            tokens.append(int(rng.integers(lo, hi)))
        elif rng.random() < config.class_token_rate:
            tokens.append(int(rng.integers(cls_lo, cls_hi)))
        else:
            tokens.append(int(rng.integers(fill_lo, fill_hi)))
    return tokens


def _generate_split(config: SyntheticConfig, per_domain: int,
                    offsets: dict[tuple[str, int], int],
                    rng: np.random.Generator, labeled: bool) -> Dataset:
    schema = AttributeSchema(dict(config.attributes))
    n = per_domain * max(config.attributes.values())
    assignment = {a: _domain_assignments(n, n_dom, rng)
                  for a, n_dom in config.attributes.items()}
    samples = []
    for i in range(n):
        doms = {a: int(assignment[a][i]) for a in config.attributes}
        base = int(rng.integers(config.num_classes))
        shifts = [offsets[(a, doms[a])]
                  for a in config.attributes if rng.random() < config.label_bias]
        label = shifted_label(base, shifts, config.num_classes)
        tokens = _draw_tokens(config, base, doms, offsets, rng)
        samples.append(Sample(tokens=tokens,
                              label=label if labeled else None,
                              attrs=doms))
    return Dataset(schema=schema, vocab_size=config.vocab_size,
                   num_classes=config.num_classes, samples=samples)


def generate_synthetic(config: SyntheticConfig) -> DatasetSplits:
    """Train/dev/test (and optional unlabeled) splits, deterministic in seed."""
    root = np.random.SeedSequence(config.seed)
    keys = root.spawn(5)
    offsets = sample_domain_offsets(config, np.random.default_rng(keys[0]))
    train = _generate_split(config, config.samples_per_domain, offsets,
                            np.random.default_rng(keys[1]), labeled=True)
    dev = _generate_split(config, config.dev_per_domain, offsets,
                          np.random.default_rng(keys[2]), labeled=True)
    test = _generate_split(config, config.test_per_domain, offsets,
                           np.random.default_rng(keys[3]), labeled=True)
    unlabeled = None
    if config.unlabeled_per_domain > 0:
        unlabeled = _generate_split(config, config.unlabeled_per_domain, offsets,
                                    np.random.default_rng(keys[4]), labeled=False)
    return DatasetSplits(train=train, dev=dev, test=test, unlabeled=unlabeled)


# ---------------------------------------------------------------------------
# persistence: line-delimited JSON with a header record


def save_dataset(dataset: Dataset, path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("w", encoding="utf-8") as fh:
        header = {"format_version": FORMAT_VERSION,
                  "schema": {"attributes": dataset.schema.attributes},
                  "vocab_size": dataset.vocab_size,
                  "num_classes": dataset.num_classes}
        fh.write(json.dumps(header) + "\n")
        for s in dataset.samples:
            fh.write(json.dumps({"tokens": s.tokens, "label": s.label,
                                 "attrs": s.attrs}) + "\n")
    tmp.replace(path)


def _require(record: dict, key: str, line_no: int):
    if key not in record:
        raise DatasetError(f"line {line_no}: missing field {key!r}")
    return record[key]


def load_dataset(path) -> Dataset:
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DatasetError("empty dataset file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise DatasetError(f"line 1: invalid JSON header ({e})") from e
    schema_rec = _require(header, "schema", 1)
    attributes = _require(schema_rec, "attributes", 1)
    schema = AttributeSchema({str(k): int(v) for k, v in attributes.items()})
    vocab_size = int(_require(header, "vocab_size", 1))
    num_classes = int(_require(header, "num_classes", 1))

    samples = []
    for i, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise DatasetError(f"line {i}: invalid JSON ({e})") from e
        tokens = _require(rec, "tokens", i)
        label = _require(rec, "label", i)
        attrs = _require(rec, "attrs", i)
        if not isinstance(tokens, list) or not all(isinstance(t, int) for t in tokens):
            raise DatasetError(f"line {i}: field 'tokens' must be an int array")
        if any(t < 0 or t >= vocab_size for t in tokens):
            raise DatasetError(f"line {i}: field 'tokens' has ids outside the vocabulary")
        if label is not None:
            if not isinstance(label, int) or not 0 <= label < num_classes:
                raise DatasetError(f"line {i}: field 'label' outside class range")
        for a, n_dom in schema.attributes.items():
            if a not in attrs:
                raise DatasetError(f"line {i}: field 'attrs' missing attribute {a!r}")
            dom = attrs[a]
            if not isinstance(dom, int) or not 0 <= dom < n_dom:
                raise DatasetError(f"line {i}: field 'attrs.{a}' domain {dom} out of range")
        samples.append(Sample(tokens=[int(t) for t in tokens],
                              label=label,
                              attrs={a: int(attrs[a]) for a in schema.attributes}))
    return Dataset(schema=schema, vocab_size=vocab_size,
                   num_classes=num_classes, samples=samples)


def save_splits(splits: DatasetSplits, out_dir) -> dict[str, str]:
    """Write train/dev/test(.jsonl), optional unlabeled, and schema.json."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {}
    for name in ("train", "dev", "test"):
        ds = getattr(splits, name)
        p = out_dir / f"{name}.jsonl"
        save_dataset(ds, p)
        written[name] = str(p)
    if splits.unlabeled is not None:
        p = out_dir / "unlabeled.jsonl"
        save_dataset(splits.unlabeled, p)
        written["unlabeled"] = str(p)
    schema_path = out_dir / "schema.json"
    tmp = schema_path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps({
        "attributes": splits.train.schema.attributes,
        "vocab_size": splits.train.vocab_size,
        "num_classes": splits.train.num_classes,
    }, indent=2) + "\n", encoding="utf-8")
    tmp.replace(schema_path)
    written["schema"] = str(schema_path)
    return written


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    """Padded model input with generation targets and per-sample attributes.

    input_ids carry the anchor token at position 0; gen_* index scored
    generation positions (masked slots for MLM, next-token slots for ARM)
    and are None when the batch was collated without generation targets.
    """

    input_ids: np.ndarray
    lengths: np.ndarray
    labels: np.ndarray
    attrs: dict[str, np.ndarray]
    gen_b: Optional[np.ndarray]
    gen_s: Optional[np.ndarray]
    gen_targets: Optional[np.ndarray]

    @property
    def size(self) -> int:
        return self.input_ids.shape[0]

    @property
    def seq_len(self) -> int:
        return self.input_ids.shape[1]


def collate(samples: list[Sample], mode: str, *,
            mask_ratio: float = 0.15,
            rng: Optional[np.random.Generator] = None,
            with_generation: bool = True,
            bert_style: bool = False,
            vocab_size: Optional[int] = None) -> Batch:
    """Pad a list of samples into one batch for the given objective."""
    if mode not in ("mlm", "arm"):
        raise ValueError(f"unknown objective mode {mode!r}")
    if not samples:
        raise ValueError("cannot collate an empty batch")
    b = len(samples)
    lengths = np.array([len(s.tokens) + 1 for s in samples], dtype=np.int64)
    max_len = int(lengths.max())
    input_ids = np.full((b, max_len), PAD_ID, dtype=np.int64)
    gen_b: list[int] = []
    gen_s: list[int] = []
    gen_t: list[int] = []
    for i, s in enumerate(samples):
        content = s.tokens
        if mode == "mlm" and with_generation and content:
            if rng is None:
                raise ValueError("MLM masking needs an rng")
            content, positions, originals = mask_tokens(
                content, mask_ratio, rng, bert_style=bert_style, vocab_size=vocab_size)
            gen_b += [i] * len(positions)
            gen_s += [p + 1 for p in positions]  # +1 for the anchor slot
            gen_t += originals
        input_ids[i, 0] = ANCHOR_ID
        input_ids[i, 1:1 + len(content)] = content
        if mode == "arm" and with_generation:
            n = len(s.tokens) + 1
            for t in range(n - 1):
                gen_b.append(i)
                gen_s.append(t)
                gen_t.append(int(input_ids[i, t + 1]))
    labels = np.array([-1 if s.label is None else s.label for s in samples],
                      dtype=np.int64)
    attrs = {}
    if samples[0].attrs:
        for a in samples[0].attrs:
            attrs[a] = np.array([s.attrs[a] for s in samples], dtype=np.int64)
    if with_generation:
        gen = (np.asarray(gen_b, dtype=np.int64),
               np.asarray(gen_s, dtype=np.int64),
               np.asarray(gen_t, dtype=np.int64))
    else:
        gen = (None, None, None)
    return Batch(input_ids=input_ids, lengths=lengths, labels=labels, attrs=attrs,
                 gen_b=gen[0], gen_s=gen[1], gen_targets=gen[2])
