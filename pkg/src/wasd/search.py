"""Precision estimation and the greedy add-then-prune rule search."""

from __future__ import annotations

import math
from collections import Counter
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass, field

import numpy as np
from statsmodels.stats.proportion import proportion_confint

from .attribution import AttributionCache, AttributorKind
from .errors import ContextOverflowError, NeighborhoodError
from .model import ActivationModel, Intervention, NeuronRef, Prompt
from .perturb import (
    NeighborhoodSample,
    PerturbParams,
    enumerate_neighborhood,
    gen_neighborhood,
    params_from_json,
    params_to_json,
)
from .predicate import CandidatePredicate, Predicate, generate_predicates, sort_candidates
from .rng import combine


class Rule:
    """A conjunction of predicates, at most one per neuron."""

    __slots__ = ("_preds", "_sorted")

    def __init__(self, predicates: Iterable[Predicate] = ()):
        preds: dict[NeuronRef, Predicate] = {}
        for p in predicates:
            if p.neuron in preds:
                raise ValueError(f"rule has two predicates on {p.neuron}")
            preds[p.neuron] = p
        self._preds = preds
        self._sorted: tuple[Predicate, ...] | None = None

    @property
    def predicates(self) -> tuple[Predicate, ...]:
        if self._sorted is None:
            self._sorted = tuple(self._preds[k] for k in sorted(self._preds))
        return self._sorted

    def neurons(self) -> frozenset[NeuronRef]:
        return frozenset(self._preds)

    def interventions(self) -> list[Intervention]:
        return [Intervention(p.neuron, p.value) for p in self.predicates]

    def with_predicate(self, p: Predicate) -> Rule:
        return Rule([*self._preds.values(), p])

    def without(self, neuron: NeuronRef) -> Rule:
        return Rule(p for n, p in self._preds.items() if n != neuron)

    def __contains__(self, item) -> bool:
        if isinstance(item, Predicate):
            return self._preds.get(item.neuron) == item
        return item in self._preds

    def __len__(self) -> int:
        return len(self._preds)

    def __iter__(self):
        return iter(self.predicates)

    def __eq__(self, other) -> bool:
        return isinstance(other, Rule) and self._preds == other._preds

    def __hash__(self) -> int:
        return hash(frozenset(self._preds.values()))

    def __repr__(self) -> str:
        return f"Rule({list(self.predicates)!r})"

    def render(self) -> str:
        return "\n".join(
            f"L{p.neuron.layer} C{p.neuron.channel} P-{p.neuron.pos_from_end} := {p.value:.6g}"
            for p in self.predicates
        )

    def to_json(self) -> list[dict]:
        return [
            {"layer": p.neuron.layer, "channel": p.neuron.channel,
             "pos_from_end": p.neuron.pos_from_end, "value": p.value}
            for p in self.predicates
        ]

    @classmethod
    def from_json(cls, rows: list[dict]) -> Rule:
        return cls(
            Predicate(NeuronRef(int(r["layer"]), int(r["channel"]), int(r["pos_from_end"])), float(r["value"]))
            for r in rows
        )


@dataclass(frozen=True)
class OutputAcceptor:
    """Which next tokens count as the target behaviour.

    ``equal`` accepts exactly f(x); ``token_set`` accepts any token in
    ``tokens`` regardless of f(x).
    """

    kind: str = "equal"
    tokens: frozenset[int] = frozenset()

    def __post_init__(self):
        if self.kind not in ("equal", "token_set"):
            raise ValueError(f"unknown acceptor kind {self.kind!r}")
        object.__setattr__(self, "tokens", frozenset(int(t) for t in self.tokens))
        if self.kind == "token_set" and not self.tokens:
            raise ValueError("token_set acceptor needs at least one token")

    def accepts(self, token: int, original: int) -> bool:
        if self.kind == "equal":
            return token == original
        return token in self.tokens

    def mask(self, tokens: np.ndarray, original: int) -> np.ndarray:
        if self.kind == "equal":
            return tokens == original
        return np.isin(tokens, sorted(self.tokens))

    def to_json(self) -> dict:
        return {"kind": self.kind, "tokens": sorted(self.tokens)}

    @classmethod
    def from_json(cls, d: dict | None) -> OutputAcceptor:
        if not d:
            return cls()
        return cls(d.get("kind", "equal"), frozenset(d.get("tokens", ())))


@dataclass(frozen=True)
class PrecisionEstimate:
    value: float
    hits: int
    trials: int
    ci95_low: float
    ci95_high: float
    exact: bool
    skipped: int = 0

    def to_json(self) -> dict:
        return asdict(self)


def wilson_interval(hits: int, trials: int) -> tuple[float, float]:
    lo, hi = proportion_confint(hits, trials, alpha=0.05, method="wilson")
    p = hits / trials
    # clip float noise so the interval always brackets the point estimate
    return min(max(0.0, float(lo)), p), max(min(1.0, float(hi)), p)


def _absent_count(model: ActivationModel, rule: Rule, prompts: Sequence[Prompt]) -> int:
    if not len(rule):
        return 0
    lengths = Counter(len(xp) for xp in prompts)
    return sum(
        n for length, n in lengths.items() for p in rule.predicates if not model.has_neuron(p.neuron, length)
    )


def estimate_precision(
    model: ActivationModel,
    x: Sequence[int],
    rule: Rule,
    sample: NeighborhoodSample,
    acceptor: OutputAcceptor | None = None,
    original: int | None = None,
) -> PrecisionEstimate:
    """Fraction of neighbors whose intervened output the acceptor accepts.

    Predicates on positions a shortened neighbor lacks are dropped for that
    neighbor; ``skipped`` counts those (neighbor, predicate) pairs.
    """
    if len(sample) == 0:
        raise NeighborhoodError("empty sample")
    acceptor = acceptor or OutputAcceptor()
    if original is None:
        original = model.forward(x).next_token
    # Monte Carlo samples repeat prompts; run each distinct prompt once
    uniq: dict[Prompt, int] = {}
    index = np.fromiter((uniq.setdefault(p, len(uniq)) for p in sample.prompts), dtype=np.int64,
                        count=len(sample.prompts))
    distinct = list(uniq)
    toks = model.next_tokens(distinct, rule.interventions(), skip_absent=True)
    ok = acceptor.mask(toks, original)[index]
    hits = int(ok.sum())
    trials = len(sample.prompts)
    skipped = _absent_count(model, rule, sample.prompts)
    if sample.exact:
        if ok.all():
            value = 1.0
        else:
            value = math.fsum(w for w, k in zip(sample.weights, ok) if k) / math.fsum(sample.weights)
        return PrecisionEstimate(value, hits, trials, value, value, True, skipped)
    value = hits / trials
    lo, hi = wilson_interval(hits, trials)
    return PrecisionEstimate(value, hits, trials, min(lo, value), max(hi, value), False, skipped)


@dataclass(frozen=True)
class TraceStep:
    phase: str  # "add" or "prune"
    predicate: Predicate
    accepted: bool
    precision_before: float
    precision_after: float

    def to_json(self) -> dict:
        n = self.predicate.neuron
        return {
            "phase": self.phase,
            "layer": n.layer,
            "channel": n.channel,
            "pos_from_end": n.pos_from_end,
            "value": self.predicate.value,
            "accepted": self.accepted,
            "precision_before": self.precision_before,
            "precision_after": self.precision_after,
        }


@dataclass
class SearchResult:
    rule: Rule
    precision: PrecisionEstimate
    reached_tau: bool
    trace: list[TraceStep] = field(default_factory=list)
    baseline: PrecisionEstimate | None = None
    holds_on_origin: bool | None = None
    original_token: int | None = None
    accepted_count: int = 0
    candidate_count: int = 0

    def to_json(self) -> dict:
        return {
            "rule": self.rule.to_json(),
            "precision": self.precision.to_json(),
            "reached_tau": self.reached_tau,
            "baseline": None if self.baseline is None else self.baseline.to_json(),
            "holds_on_origin": self.holds_on_origin,
            "original_token": self.original_token,
            "accepted_count": self.accepted_count,
            "candidate_count": self.candidate_count,
            "trace": [s.to_json() for s in self.trace],
        }


def _check_tau(tau: float) -> None:
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must lie in (0, 1], got {tau}")


def additive_search(
    model: ActivationModel,
    x: Sequence[int],
    candidates: Sequence[CandidatePredicate],
    sample: NeighborhoodSample,
    tau: float = 0.9,
    acceptor: OutputAcceptor | None = None,
    original: int | None = None,
) -> SearchResult:
    """Add predicates in contribution order, keeping strict improvements.

    Stops at the first state whose precision reaches ``tau``.  If the
    candidates run out first, the best rule so far is returned with
    ``reached_tau=False``.
    """
    _check_tau(tau)
    if original is None:
        original = model.forward(x).next_token
    cands = sort_candidates(candidates)
    rule = Rule()
    current = estimate_precision(model, x, rule, sample, acceptor, original)
    baseline = current
    trace: list[TraceStep] = []
    accepted = 0
    if current.value < tau:
        for c in cands:
            trial = rule.with_predicate(c.predicate)
            new = estimate_precision(model, x, trial, sample, acceptor, original)
            keep = new.value > current.value
            trace.append(TraceStep("add", c.predicate, keep, current.value, new.value))
            if keep:
                rule, current = trial, new
                accepted += 1
            if current.value >= tau:
                break
    return SearchResult(
        rule=rule,
        precision=current,
        reached_tau=current.value >= tau,
        trace=trace,
        baseline=baseline,
        original_token=original,
        accepted_count=accepted,
        candidate_count=len(cands),
    )


def prune(
    model: ActivationModel,
    x: Sequence[int],
    rule: Rule,
    sample: NeighborhoodSample,
    tau: float = 0.9,
    acceptor: OutputAcceptor | None = None,
    order: Sequence[NeuronRef] | None = None,
    original: int | None = None,
    trace: list[TraceStep] | None = None,
) -> Rule:
    """Drop every predicate whose removal keeps precision >= tau.

    ``order`` is the visiting order (descending contribution); neurons of
    the rule missing from it are visited afterwards in neuron order.  Passes
    repeat until one removes nothing, since in a non-monotone model a later
    removal can make an earlier-kept predicate redundant.
    """
    _check_tau(tau)
    if not len(rule):
        return rule
    if original is None:
        original = model.forward(x).next_token
    seen = set()
    visit = []
    for n in list(order or ()) + sorted(rule.neurons()):
        if n in rule and n not in seen:
            seen.add(n)
            visit.append(n)
    current = rule
    before = estimate_precision(model, x, current, sample, acceptor, original).value if trace is not None else math.nan
    changed = True
    while changed and len(current):
        changed = False
        for n in visit:
            if n not in current:
                continue
            pred = next(p for p in current.predicates if p.neuron == n)
            trial = current.without(n)
            prec = estimate_precision(model, x, trial, sample, acceptor, original)
            drop = prec.value >= tau
            if trace is not None:
                trace.append(TraceStep("prune", pred, drop, before, prec.value))
            if drop:
                current, before, changed = trial, prec.value, True
    return current


@dataclass(frozen=True)
class ExplainParams:
    """Knobs for one explanation run.

    ``max_edits`` switches to an exactly enumerated neighborhood.
    ``shared_sample=False`` draws a second, independently seeded neighborhood
    for predicate generation.  ``attribution_samples`` caps how many
    neighbors feed predicate generation (all by default).
    ``ablation_top`` limits ablation to the most active neurons per prompt
    (off by default).
    """

    tau: float = 0.9
    lam: float = 6.5
    perturb: PerturbParams = field(default_factory=PerturbParams)
    attributor: str = AttributorKind.ABLATION.value
    acceptor: OutputAcceptor = field(default_factory=OutputAcceptor)
    max_edits: int | None = None
    shared_sample: bool = True
    attribution_samples: int | None = None
    ablation_top: int | None = None

    def validate(self) -> None:
        _check_tau(self.tau)
        if not self.lam > 0:
            raise ValueError("lambda must be > 0")
        AttributorKind(self.attributor)
        self.perturb.validate()
        if self.attribution_samples is not None and self.attribution_samples < 1:
            raise ValueError("attribution_samples must be >= 1")
        if self.ablation_top is not None and self.ablation_top < 1:
            raise ValueError("ablation_top must be >= 1")

    def replace(self, **kw) -> ExplainParams:
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d.update(kw)
        return ExplainParams(**d)

    def to_json(self) -> dict:
        return {
            "tau": self.tau,
            "lam": self.lam,
            "perturb": params_to_json(self.perturb),
            "attributor": self.attributor,
            "acceptor": self.acceptor.to_json(),
            "max_edits": self.max_edits,
            "shared_sample": self.shared_sample,
            "attribution_samples": self.attribution_samples,
            "ablation_top": self.ablation_top,
        }

    @classmethod
    def from_json(cls, d: dict) -> ExplainParams:
        d = dict(d)
        if "perturb" in d:
            d["perturb"] = params_from_json(d["perturb"])
        if "acceptor" in d:
            d["acceptor"] = OutputAcceptor.from_json(d["acceptor"])
        return cls(**d)


def build_neighborhood(model: ActivationModel, x: Sequence[int], params: ExplainParams) -> NeighborhoodSample:
    if params.max_edits is not None:
        return enumerate_neighborhood(x, params.max_edits, params.perturb, model.vocab_size)
    return gen_neighborhood(x, params.perturb, model.vocab_size)


def _generation_sample(model, x, sample: NeighborhoodSample, params: ExplainParams) -> NeighborhoodSample:
    if not params.shared_sample:
        redraw = params.perturb.with_seed(combine(params.perturb.seed, 0x9E4))
        sample = gen_neighborhood(x, redraw, model.vocab_size)
    if params.attribution_samples is not None and params.attribution_samples < len(sample):
        if sample.exact:
            keep = sample.prompts[: params.attribution_samples]
            return NeighborhoodSample(sample.origin, keep, None, sample.params)
        return sample.head(params.attribution_samples)
    return sample


def explain(
    model: ActivationModel,
    x: Sequence[int],
    params: ExplainParams | None = None,
    cache: AttributionCache | None = None,
    sample: NeighborhoodSample | None = None,
) -> SearchResult:
    """Neighborhood -> candidate predicates -> additive search -> prune."""
    params = params or ExplainParams()
    params.validate()
    x = model.check_prompt(x)
    original = model.forward(x).next_token
    if sample is None:
        sample = build_neighborhood(model, x, params)
    gen = _generation_sample(model, x, sample, params)
    cands = generate_predicates(model, x, gen, params.attributor, params.lam, cache, params.ablation_top)
    res = additive_search(model, x, cands, sample, params.tau, params.acceptor, original)
    order = [s.predicate.neuron for s in res.trace if s.accepted]
    trace = list(res.trace)
    pruned = prune(model, x, res.rule, sample, params.tau, params.acceptor, order, original, trace)
    final = estimate_precision(model, x, pruned, sample, params.acceptor, original)
    on_origin = model.forward(x, _present(model, pruned, len(x))).next_token
    return SearchResult(
        rule=pruned,
        precision=final,
        reached_tau=final.value >= params.tau,
        trace=trace,
        baseline=res.baseline,
        holds_on_origin=params.acceptor.accepts(on_origin, original),
        original_token=original,
        accepted_count=res.accepted_count,
        candidate_count=res.candidate_count,
    )


def _present(model: ActivationModel, rule: Rule, length: int) -> list[Intervention]:
    return [iv for iv in rule.interventions() if model.has_neuron(iv.target, length)]


def intervened_generate(model: ActivationModel, x: Sequence[int], rule: Rule, steps: int) -> list[int]:
    """Greedy decoding with ``rule`` clamped at every step.

    Positions are re-anchored to the end of the growing sequence.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    seq = model.check_prompt(x)
    if len(seq) + steps - 1 > model.max_context:
        raise ContextOverflowError(
            f"generating {steps} tokens from a length-{len(seq)} prompt exceeds context {model.max_context}"
        )
    out = []
    for _ in range(steps):
        tok = model.forward(seq, _present(model, rule, len(seq))).next_token
        out.append(tok)
        seq = seq + (tok,)
    return out
