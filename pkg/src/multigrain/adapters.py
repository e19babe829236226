"""Low-rank adapter modules, their per-attribute banks, and composition.

Two module families: LoRA pairs (A @ B, rank r) for coarse views and
Kronecker pairs (C (x) D, factor r') for fine-grained domain views.  A bank
holds one module per (injection site, attribute, granularity) slot, with the
two sharing schemes: one C per attribute across that attribute's domains,
and one coarse module (plus one alignment module c') across attributes.

Composition is purely additive on activations: a context selects modules and
averaging weights per sample, and the batch planner groups samples so each
module runs once per batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    apply_kron_factored,
    kron,
    matmul,
    scale,
    scatter_rows,
    take_rows,
)

COARSE = "c"
ALIGN = "cprime"

MODE_FINE = "fine"
MODE_GENERAL = "general"
MODE_AVG = "avg"
MODE_RAND = "rand"
MODE_COARSE_ONLY = "coarse"

MODES = (MODE_FINE, MODE_GENERAL, MODE_AVG, MODE_RAND, MODE_COARSE_ONLY)

GranTag = Union[str, int]  # COARSE, ALIGN, or a fine-domain id


class FactorizationError(ValueError):
    """Kronecker factor does not divide the layer dimensions."""


def default_init_bound(d_in: int) -> float:
    """Kaiming-style uniform bound for the non-zero factor."""
    return math.sqrt(6.0 / d_in)


def default_kron_factor(d_in: int, d_out: int) -> int:
    """Divisor of gcd(d_in, d_out) nearest to sqrt(min(d_in, d_out)).

    Reproduces the (32, 24) factor shapes at width 768 and gives 8 at the
    toy width 64.  Ties break toward the smaller divisor.
    """
    g = math.gcd(d_in, d_out)
    target = math.sqrt(min(d_in, d_out))
    divisors = [f for f in range(1, g + 1) if g % f == 0]
    return min(divisors, key=lambda f: (abs(f - target), f))


class LoraModule:
    """Additive update A @ B with A: [d_in, r], B: [r, d_out]."""

    __slots__ = ("a", "b")

    def __init__(self, a: Tensor, b: Tensor):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"lora factors {a.shape} x {b.shape} do not align")
        self.a = a
        self.b = b

    @property
    def d_in(self) -> int:
        return self.a.shape[0]

    @property
    def d_out(self) -> int:
        return self.b.shape[1]

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    def materialize(self) -> Tensor:
        return matmul(self.a, self.b)

    def apply(self, x: Tensor) -> Tensor:
        return matmul(matmul(x, self.a), self.b)

    def tensors(self) -> list[tuple[str, Tensor]]:
        return [("A", self.a), ("B", self.b)]


class KronaModule:
    """Additive update C (x) D with C: [d_in/r', r'], D: [r', d_out/r']."""

    __slots__ = ("c", "d")

    def __init__(self, c: Tensor, d: Tensor):
        if c.ndim != 2 or d.ndim != 2 or c.shape[1] != d.shape[0]:
            raise ShapeError(f"krona factors {c.shape} x {d.shape} do not align")
        self.c = c
        self.d = d

    @property
    def d_in(self) -> int:
        return self.c.shape[0] * self.d.shape[0]

    @property
    def d_out(self) -> int:
        return self.c.shape[1] * self.d.shape[1]

    @property
    def factor(self) -> int:
        return self.c.shape[1]

    def materialize(self) -> Tensor:
        return kron(self.c, self.d)

    def apply(self, x: Tensor) -> Tensor:
        return apply_kron_factored(self.c, self.d, x)

    def tensors(self) -> list[tuple[str, Tensor]]:
        return [("C", self.c), ("D", self.d)]


AdapterModule = Union[LoraModule, KronaModule]


def init_lora(d_in: int, d_out: int, rank: int, rng: np.random.Generator,
              bound: Optional[float] = None, dtype=np.float64) -> LoraModule:
    """A uniform in [-bound, bound], B zeroed so the initial delta is 0."""
    if rank < 1 or rank > min(d_in, d_out):
        raise ValueError(f"rank {rank} outside [1, min({d_in}, {d_out})]")
    if bound is None:
        bound = default_init_bound(d_in)
    a = Tensor(rng.uniform(-bound, bound, size=(d_in, rank)),
               requires_grad=True, dtype=dtype)
    b = Tensor(np.zeros((rank, d_out)), requires_grad=True, dtype=dtype)
    return LoraModule(a, b)


def init_krona(d_in: int, d_out: int, factor: int, rng: np.random.Generator,
               bound: Optional[float] = None, dtype=np.float64) -> KronaModule:
    """C uniform in [-bound, bound], D zeroed so the initial delta is 0."""
    if factor < 1 or factor > min(d_in, d_out):
        raise FactorizationError(f"factor {factor} outside [1, min({d_in}, {d_out})]")
    if d_in % factor or d_out % factor:
        raise FactorizationError(
            f"factor {factor} does not divide dims ({d_in}, {d_out})")
    if bound is None:
        bound = default_init_bound(d_in)
    c = Tensor(rng.uniform(-bound, bound, size=(d_in // factor, factor)),
               requires_grad=True, dtype=dtype)
    d = Tensor(np.zeros((factor, d_out // factor)), requires_grad=True, dtype=dtype)
    return KronaModule(c, d)


def init_module(kind: str, d_in: int, d_out: int, rank_or_factor: int,
                rng: np.random.Generator, bound: Optional[float] = None,
                dtype=np.float64) -> AdapterModule:
    if kind == "lora":
        return init_lora(d_in, d_out, rank_or_factor, rng, bound, dtype)
    if kind == "krona":
        return init_krona(d_in, d_out, rank_or_factor, rng, bound, dtype)
    raise ValueError(f"unknown adapter kind {kind!r}")


# ---------------------------------------------------------------------------
# composition


class ComposedDelta:
    """Weighted sum of adapter modules, applied without materialization.

    Exactly linear in its input; materialize() exists for oracle tests.
    """

    def __init__(self, items: Sequence[tuple[AdapterModule, float]]):
        if not items:
            raise ValueError("composition needs at least one module")
        d_in, d_out = items[0][0].d_in, items[0][0].d_out
        for m, _ in items:
            if (m.d_in, m.d_out) != (d_in, d_out):
                raise ShapeError(
                    f"mixed module dims ({m.d_in}, {m.d_out}) vs ({d_in}, {d_out})")
        self.items = list(items)
        self.d_in = d_in
        self.d_out = d_out

    def apply(self, x: Tensor) -> Tensor:
        out = None
        for m, w in self.items:
            term = m.apply(x)
            if w != 1.0:
                term = scale(term, w)
            out = term if out is None else out + term
        return out

    def materialize(self) -> Tensor:
        out = None
        for m, w in self.items:
            term = m.materialize()
            if w != 1.0:
                term = scale(term, w)
            out = term if out is None else out + term
        return out


def compose_delta(modules: Sequence[AdapterModule],
                  weights: Optional[Sequence[float]] = None) -> ComposedDelta:
    """Uniform 1/n average of modules unless explicit weights are given."""
    if weights is None:
        weights = [1.0 / len(modules)] * len(modules)
    if len(weights) != len(modules):
        raise ValueError("one weight per module required")
    return ComposedDelta(list(zip(modules, weights)))


@dataclass
class CompositionContext:
    """Per-sample module selection: (attribute, granularity tag, weight).

    Weights across the selected slots sum to 1; sites where a slot has no
    module renormalize over the slots present there.
    """

    mode: str
    entries: list[tuple[str, GranTag, float]]

    def __post_init__(self):
        if not self.entries:
            raise ValueError("empty composition context")
        total = sum(w for _, _, w in self.entries)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"context weights sum to {total}, expected 1")


def build_context(attributes: dict[str, int], mode: str,
                  sample_attrs: Optional[dict[str, int]] = None,
                  rng: Optional[np.random.Generator] = None) -> CompositionContext:
    """Realize one sample's module selection for the given strategy.

    FINE needs the sample's per-attribute domain assignments; RAND needs an
    rng to draw the substitute fine module.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if not attributes:
        raise ValueError("no attributes configured")
    n_attr = len(attributes)
    entries: list[tuple[str, GranTag, float]] = []
    if mode == MODE_FINE:
        if sample_attrs is None:
            raise ValueError("FINE mode needs the sample's domain assignments")
        w = 1.0 / (2 * n_attr)
        for a in attributes:
            if a not in sample_attrs:
                raise KeyError(f"sample lacks attribute {a!r}")
            entries += [(a, COARSE, w), (a, int(sample_attrs[a]), w)]
    elif mode == MODE_GENERAL:
        w = 1.0 / (2 * n_attr)
        for a in attributes:
            entries += [(a, COARSE, w), (a, ALIGN, w)]
    elif mode == MODE_COARSE_ONLY:
        w = 1.0 / n_attr
        for a in attributes:
            entries.append((a, COARSE, w))
    elif mode == MODE_AVG:
        w = 1.0 / (2 * n_attr)
        for a, n_dom in attributes.items():
            if n_dom < 1:
                raise ValueError(f"attribute {a!r} has no fine domains")
            entries.append((a, ALIGN, w))
            entries += [(a, s, w / n_dom) for s in range(n_dom)]
    elif mode == MODE_RAND:
        if rng is None:
            raise ValueError("RAND mode needs an rng")
        w = 1.0 / (2 * n_attr)
        for a, n_dom in attributes.items():
            entries.append((a, ALIGN, w))
            entries.append((a, int(rng.integers(n_dom)), w))
    return CompositionContext(mode=mode, entries=entries)


# ---------------------------------------------------------------------------
# the bank


@dataclass
class BankConfig:
    rank: int = 4
    fine_kind: str = "krona"                  # "krona" | "lora"
    share_c_per_attribute: bool = True        # krona only
    share_coarse_across_attributes: bool = True
    kron_factor: Optional[int] = None         # default: derived per site dims
    init_bound: Optional[float] = None        # default: sqrt(6 / d_in)

    @classmethod
    def decomposed(cls, rank: int = 4, kron_factor: Optional[int] = None) -> "BankConfig":
        return cls(rank=rank, fine_kind="krona", share_c_per_attribute=True,
                   share_coarse_across_attributes=True, kron_factor=kron_factor)

    @classmethod
    def non_decomposed(cls, rank: int = 4) -> "BankConfig":
        return cls(rank=rank, fine_kind="lora", share_c_per_attribute=False,
                   share_coarse_across_attributes=False)


class AdapterBank:
    """All (site, attribute, granularity) modules plus the sharing wiring.

    Read-only during forward passes; the optimizer owns updates.  Tensor
    names follow "site/attr/granularity/{A|B|C|D}" with attr "shared" for
    globally shared coarse modules.
    """

    def __init__(self, attributes: dict[str, int],
                 sites: dict[str, tuple[int, int]],
                 fine_sites: Iterable[str],
                 config: BankConfig,
                 rng: np.random.Generator,
                 dtype=np.float64):
        if not attributes:
            raise ValueError("bank needs at least one attribute")
        self.attributes = dict(attributes)
        self.sites = dict(sites)
        self.fine_sites = [s for s in self.sites if s in set(fine_sites)]
        unknown = set(fine_sites) - set(self.sites)
        if unknown:
            raise ValueError(f"fine sites {sorted(unknown)} not in site map")
        self.config = config
        self._slots: dict[tuple[str, str, GranTag], AdapterModule] = {}
        self._named: list[tuple[str, Tensor]] = []
        self.groups: dict[str, list[tuple[str, Tensor]]] = {
            "coarse": [], "cprime": [], "fine": []}
        self._build(rng, dtype)

    def _register(self, group: str, name: str, tensor: Tensor) -> None:
        tensor.name = name
        self._named.append((name, tensor))
        self.groups[group].append((name, tensor))

    def _build(self, rng: np.random.Generator, dtype) -> None:
        cfg = self.config
        for site, (d_in, d_out) in self.sites.items():
            # coarse c and alignment c', shared across attributes or per attribute
            coarse_for: dict[tuple[str, str], AdapterModule] = {}
            if cfg.share_coarse_across_attributes:
                for tag, group in ((COARSE, "coarse"), (ALIGN, "cprime")):
                    m = init_lora(d_in, d_out, cfg.rank, rng, cfg.init_bound, dtype)
                    for part, t in m.tensors():
                        self._register(group, f"{site}/shared/{tag}/{part}", t)
                    for a in self.attributes:
                        coarse_for[(a, tag)] = m
            else:
                for a in self.attributes:
                    for tag, group in ((COARSE, "coarse"), (ALIGN, "cprime")):
                        m = init_lora(d_in, d_out, cfg.rank, rng, cfg.init_bound, dtype)
                        for part, t in m.tensors():
                            self._register(group, f"{site}/{a}/{tag}/{part}", t)
                        coarse_for[(a, tag)] = m
            for (a, tag), m in coarse_for.items():
                self._slots[(site, a, tag)] = m

            if site not in self.fine_sites:
                continue
            for a, n_dom in self.attributes.items():
                if cfg.fine_kind == "krona":
                    factor = cfg.kron_factor or default_kron_factor(d_in, d_out)
                    shared_c: Optional[Tensor] = None
                    if cfg.share_c_per_attribute:
                        bound = cfg.init_bound or default_init_bound(d_in)
                        shared_c = Tensor(
                            rng.uniform(-bound, bound, size=(d_in // factor, factor)),
                            requires_grad=True, dtype=dtype)
                        self._register("fine", f"{site}/{a}/f/C", shared_c)
                    for s in range(n_dom):
                        if shared_c is not None:
                            d_t = Tensor(np.zeros((factor, d_out // factor)),
                                         requires_grad=True, dtype=dtype)
                            self._register("fine", f"{site}/{a}/f{s}/D", d_t)
                            m = KronaModule(shared_c, d_t)
                        else:
                            m = init_krona(d_in, d_out, factor, rng, cfg.init_bound, dtype)
                            for part, t in m.tensors():
                                self._register("fine", f"{site}/{a}/f{s}/{part}", t)
                        self._slots[(site, a, s)] = m
                elif cfg.fine_kind == "lora":
                    for s in range(n_dom):
                        m = init_lora(d_in, d_out, cfg.rank, rng, cfg.init_bound, dtype)
                        for part, t in m.tensors():
                            self._register("fine", f"{site}/{a}/f{s}/{part}", t)
                        self._slots[(site, a, s)] = m
                else:
                    raise ValueError(f"unknown fine adapter kind {cfg.fine_kind!r}")

    def module_for(self, site: str, attr: str, tag: GranTag) -> Optional[AdapterModule]:
        """Module at a slot, or None when the granularity is absent there."""
        if site not in self.sites:
            raise KeyError(f"unknown site {site!r}")
        if attr not in self.attributes:
            raise KeyError(f"unknown attribute {attr!r}")
        if isinstance(tag, str):
            return self._slots[(site, attr, tag)]
        if not 0 <= tag < self.attributes[attr]:
            raise KeyError(f"unknown domain {tag} for attribute {attr!r}")
        if site not in self.fine_sites:
            return None
        return self._slots[(site, attr, tag)]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self._named)

    def parameter_groups(self) -> dict[str, list[tuple[str, Tensor]]]:
        return {k: list(v) for k, v in self.groups.items()}

    def num_parameters(self) -> int:
        """Exact count of allocated scalars; shared tensors count once."""
        seen: set[int] = set()
        total = 0
        for _, t in self._named:
            if id(t) not in seen:
                seen.add(id(t))
                total += t.size
        return total

    def site_plan(self, site: str, ctxs: Sequence[CompositionContext],
                  fallback_counter: Optional[dict] = None
                  ) -> list[tuple[AdapterModule, float, Optional[np.ndarray]]]:
        """Group a batch's contexts into per-module application plans.

        Returns (module, weight, sample_indices) items where sample_indices
        None means every sample.  Slot weights are used as-is; a slot whose
        granularity has no module at this site contributes zero (the literal
        mean-of-updates reading, so a module is applied at the same scale at
        every site it occupies).  A fine domain id the bank does not know
        falls back to that attribute's alignment module (counted in
        fallback_counter under "unseen_domain").
        """
        per_module: dict[int, tuple[AdapterModule, dict[int, float]]] = {}
        n = len(ctxs)
        for i, ctx in enumerate(ctxs):
            for attr, tag, w in ctx.entries:
                if attr not in self.attributes:
                    raise KeyError(f"unknown attribute {attr!r}")
                if (isinstance(tag, int)
                        and not 0 <= tag < self.attributes[attr]
                        and fallback_counter is not None):
                    fallback_counter["unseen_domain"] = (
                        fallback_counter.get("unseen_domain", 0) + 1)
                    m = self.module_for(site, attr, ALIGN)
                else:
                    m = self.module_for(site, attr, tag)
                if m is None:
                    continue
                key = id(m)
                if key not in per_module:
                    per_module[key] = (m, {})
                weights = per_module[key][1]
                weights[i] = weights.get(i, 0.0) + w
        plan: list[tuple[AdapterModule, float, Optional[np.ndarray]]] = []
        for m, weights in per_module.values():
            by_w: dict[float, list[int]] = {}
            for i, w in weights.items():
                by_w.setdefault(w, []).append(i)
            for w, samples in by_w.items():
                if len(samples) == n:
                    plan.append((m, w, None))
                else:
                    plan.append((m, w, np.asarray(samples, dtype=np.int64)))
        return plan


def apply_site_plan(x2d: Tensor, plan, batch: int, seq: int) -> Optional[Tensor]:
    """Sum of adapter outputs for a [batch*seq, d_in] activation matrix.

    Returns None when the plan is empty (no adapters at this site).
    """
    out = None
    n_rows = batch * seq
    for module, weight, samples in plan:
        if samples is None:
            term = module.apply(x2d)
            if weight != 1.0:
                term = scale(term, weight)
        else:
            rows = (samples[:, None] * seq + np.arange(seq)[None, :]).reshape(-1)
            term = module.apply(take_rows(x2d, rows))
            if weight != 1.0:
                term = scale(term, weight)
            term = scatter_rows(term, rows, n_rows)
        out = term if out is None else out + term
    return out


# ---------------------------------------------------------------------------
# efficiency accounting


def param_count(attributes: dict[str, int], d_in: int, d_out: int, rank: int,
                decomposed: bool) -> int:
    """Scalar parameters one injection site allocates under a scheme.

    Non-decomposed: every view is a LoRA of rank `rank`, nothing shared:
        sum_a (|a|_f + 2) * r * (d_in + d_out).
    Decomposed: fine views are Kronecker pairs with one shared C per
    attribute, coarse c and alignment c' shared across attributes:
        sum_a (d_in + |a|_f * d_out) + 2 * r * (d_in + d_out).
    """
    if not attributes:
        raise ValueError("no attributes in schema")
    if d_in < 1 or d_out < 1 or rank < 1:
        raise ValueError("dims and rank must be positive")
    for a, n in attributes.items():
        if n < 0:
            raise ValueError(f"attribute {a!r} has negative domain count")
    if decomposed:
        return (sum(d_in + n * d_out for n in attributes.values())
                + 2 * rank * (d_in + d_out))
    return sum((n + 2) * rank * (d_in + d_out) for n in attributes.values())
