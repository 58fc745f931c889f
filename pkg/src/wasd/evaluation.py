"""Metrics, top-k attribution baselines, lambda grid search, the brute-force
oracle and the method-comparison experiment runner."""

from __future__ import annotations

import dataclasses
import itertools
import math
import statistics
from collections.abc import Callable, Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .attribution import AttributionCache, AttributorKind
from .errors import NoNeutralPrefixError, OracleBoundError
from .model import ActivationModel, NeuronRef, Prompt
from .perturb import (
    NEUTRAL_PREFIX_TEXTS,
    NeighborhoodSample,
    NeutralPrefixSet,
    enumerate_neighborhood,
    gen_neighborhood,
    neutral_prefix_perturb,
)
from .predicate import CandidatePredicate, Predicate
from .rng import combine
from .search import ExplainParams, OutputAcceptor, Rule, SearchResult, estimate_precision, explain

DEFAULT_LAMBDA_GRID = (1.0, 2.0, 4.0, 6.5, 8.0, 10.0)
DEFAULT_BASELINE_KS = (3, 5, 10)
DEFAULT_ORACLE_BOUND = 16


@dataclass(frozen=True)
class InstabilityScore:
    value: float
    set_a: frozenset[NeuronRef]
    set_b: frozenset[NeuronRef]


def _as_neurons(s) -> frozenset[NeuronRef]:
    if isinstance(s, Rule):
        return s.neurons()
    return frozenset(p.neuron if isinstance(p, Predicate) else p for p in s)


def jaccard_instability(a, b) -> InstabilityScore:
    """Jaccard distance between two neuron sets (clamp values are ignored).

    Two empty sets are treated as identical explanations (distance 0).
    """
    a, b = _as_neurons(a), _as_neurons(b)
    union = a | b
    if not union:
        return InstabilityScore(0.0, a, b)
    return InstabilityScore((len(union) - len(a & b)) / len(union), a, b)


@dataclass(frozen=True)
class BaselineConfig:
    k: int
    coefficient: float = 1.0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not self.coefficient > 0:
            raise ValueError("coefficient must be > 0")


def topk_baseline_rule(
    model: ActivationModel,
    x: Sequence[int],
    kind: AttributorKind | str,
    cfg: BaselineConfig,
    cache: AttributionCache | None = None,
) -> Rule:
    """Clamp the k largest contributors to ``coefficient`` x their activation."""
    local = cache if cache is not None else AttributionCache(enabled=False)
    arr = local.arrays(model, x, kind)
    n = len(arr.neurons)
    if cfg.k > n:
        raise ValueError(f"k={cfg.k} exceeds the {n} neurons available")
    # neurons are already in canonical order, so a stable sort breaks ties by NeuronRef
    top = np.argsort(-arr.contributions, kind="stable")[: cfg.k]
    return Rule(Predicate(arr.neurons[i], float(arr.activations[i]) * cfg.coefficient) for i in top)


def brute_force_minimal_rule(
    model: ActivationModel,
    x: Sequence[int],
    candidates: Sequence[CandidatePredicate],
    sample: NeighborhoodSample,
    tau: float = 0.9,
    acceptor: OutputAcceptor | None = None,
    bound: int = DEFAULT_ORACLE_BOUND,
) -> Rule | None:
    """Smallest candidate subset reaching ``tau``, or ``None`` if none does.

    Subsets are visited by size, then lexicographically by position in
    ``candidates``; the first hit is returned.
    """
    if len(candidates) > bound:
        raise OracleBoundError(f"{len(candidates)} candidates exceed the oracle bound {bound}")
    original = model.forward(x).next_token
    preds = [c.predicate for c in candidates]
    for size in range(len(preds) + 1):
        for combo in itertools.combinations(preds, size):
            rule = Rule(combo)
            if estimate_precision(model, x, rule, sample, acceptor, original).value >= tau:
                return rule
    return None


def parallel_map(fn: Callable, items: Sequence, parallelism: int) -> list:
    if parallelism <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(fn, items))


def prompt_seed(base: int, index: int, salt: int = 0) -> int:
    return combine(base, index, salt)


def _params_for(params: ExplainParams, index: int, salt: int = 0) -> ExplainParams:
    return params.replace(perturb=params.perturb.with_seed(prompt_seed(params.perturb.seed, index, salt)))


@dataclass
class GridSearchResult:
    best: float
    table: list[dict]


def grid_search_lambda(
    model: ActivationModel,
    suite: Sequence[Sequence[int]],
    grid: Sequence[float] = DEFAULT_LAMBDA_GRID,
    params: ExplainParams | None = None,
    parallelism: int = 1,
    cache: AttributionCache | None = None,
) -> GridSearchResult:
    """Pick the lambda with the best mean search precision.

    Ties go to the smaller mean rule size, then the smaller lambda.
    """
    if not grid:
        raise ValueError("lambda grid is empty")
    if not suite:
        raise ValueError("suite is empty")
    params = params or ExplainParams()
    cache = cache if cache is not None else AttributionCache()
    rows = []
    for lam in grid:
        p = params.replace(lam=float(lam))
        results = parallel_map(lambda ix: explain(model, ix[1], _params_for(p, ix[0]), cache), list(enumerate(suite)), parallelism)
        rows.append(
            {
                "lambda": float(lam),
                "mean_precision": statistics.fmean(r.precision.value for r in results),
                "mean_size": statistics.fmean(len(r.rule) for r in results),
                "reached_tau": sum(r.reached_tau for r in results),
            }
        )
    best = min(rows, key=lambda r: (-r["mean_precision"], r["mean_size"], r["lambda"]))
    return GridSearchResult(best["lambda"], rows)


# --------------------------------------------------------------------------
# experiment runner


@dataclass(frozen=True)
class ExperimentParams:
    explain: ExplainParams = field(default_factory=ExplainParams)
    baseline_ks: tuple[int, ...] = DEFAULT_BASELINE_KS
    # None: choose each coefficient by grid search for highest mean precision
    baseline_coefficients: tuple[float, ...] | None = None
    coefficient_grid: tuple[float, ...] = DEFAULT_LAMBDA_GRID
    methods: tuple[str, ...] = ("wasd", "top3", "top5", "top10")
    eval_samples: int | None = None
    prefix_texts: tuple[str, ...] | None = None
    parallelism: int = 1
    task: str = "suite"

    def to_json(self) -> dict:
        return {
            "explain": self.explain.to_json(),
            "baseline_ks": list(self.baseline_ks),
            "baseline_coefficients": None if self.baseline_coefficients is None else list(self.baseline_coefficients),
            "coefficient_grid": list(self.coefficient_grid),
            "methods": list(self.methods),
            "eval_samples": self.eval_samples,
            "prefix_texts": None if self.prefix_texts is None else list(self.prefix_texts),
            "task": self.task,
        }

    @classmethod
    def from_json(cls, d: dict) -> ExperimentParams:
        d = dict(d)
        d.pop("parallelism", None)
        if "explain" in d:
            d["explain"] = ExplainParams.from_json(d["explain"])
        for key in ("baseline_ks", "coefficient_grid", "methods", "baseline_coefficients", "prefix_texts"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


_EVAL_SALT = 0xE7A1
_PREFIX_SALT = 0x9F1C


def _mean_ci(values: Sequence[float]) -> tuple[float | None, float | None]:
    """Mean and 95% normal-approximation half-width."""
    if not values:
        return None, None
    m = statistics.fmean(values)
    if len(values) < 2:
        return m, 0.0
    z = statistics.NormalDist().inv_cdf(0.975)
    return m, z * statistics.stdev(values) / math.sqrt(len(values))


@dataclass
class ExperimentReport:
    methods: list[str]
    summary: dict[str, dict]
    rows: list[dict]
    config: dict
    excluded_from_instability: int = 0

    def to_json(self) -> dict:
        return {
            "schema_version": 1,
            "kind": "experiment_report",
            "methods": self.methods,
            "summary": self.summary,
            "rows": self.rows,
            "excluded_from_instability": self.excluded_from_instability,
            "config": self.config,
        }

    def table(self) -> str:
        """Plain-text table: Method, Task, Precision, Instability, Size."""
        head = ["Method", "Task", "Precision", "Instability", "Size"]
        body = []
        task = self.config.get("task", "suite")
        for m in self.methods:
            s = self.summary[m]
            body.append(
                [
                    _method_label(m),
                    task,
                    _fmt(s["precision"], s["precision_ci"], pct=True),
                    _fmt(s["instability"], s["instability_ci"]),
                    _fmt(s["size"], s["size_ci"], digits=2),
                ]
            )
        widths = [max(len(r[i]) for r in [head, *body]) for i in range(len(head))]
        lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in [head, *body]]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"


def _method_label(m: str) -> str:
    return f"Top-{m[3:]}" if m.startswith("top") else m.upper()


def _fmt(v, ci, pct=False, digits=3) -> str:
    if v is None:
        return "n/a"
    if pct:
        return f"{100 * v:.2f}%(±{100 * ci:.2f}%)"
    return f"{v:.{digits}f}(±{ci:.{digits}f})"


def _method_k(m: str) -> int | None:
    return int(m[3:]) if m.startswith("top") else None


def run_experiment(
    model: ActivationModel,
    suite: Sequence[Sequence[int]],
    params: ExperimentParams | None = None,
    cache: AttributionCache | None = None,
) -> ExperimentReport:
    """Compare WASD rules with top-k attribution baselines on a prompt suite.

    Precision is measured on a fresh edit neighborhood per prompt, seeded
    independently of the search neighborhood.  Instability compares the
    neuron sets derived for x and for a neutral-prefixed x.
    """
    params = params or ExperimentParams()
    if not suite:
        raise ValueError("suite is empty")
    suite = [model.check_prompt(x) for x in suite]
    ep = params.explain
    cases = [(model, x, _params_for(ep, i), prompt_seed(ep.perturb.seed, i)) for i, x in enumerate(suite)]
    config = {"model": model.to_spec(), "suite": [list(x) for x in suite], **params.to_json()}
    return _run_cases(cases, params, cache, config)


def run_planted_experiment(
    instances: Sequence,
    params: ExperimentParams | None = None,
    cache: AttributionCache | None = None,
) -> ExperimentReport:
    """The same comparison over planted instances, one model per instance.

    Each instance supplies its own perturbation parameters and edit bound,
    so search and evaluation both use its exact enumerated neighborhood.
    """
    params = params or ExperimentParams()
    if not instances:
        raise ValueError("suite is empty")
    ep = params.explain
    cases = []
    for inst in instances:
        p = ep.replace(perturb=inst.perturb, max_edits=inst.max_edits)
        cases.append((inst.model(), inst.prompt, p, inst.perturb.seed))
    config = {"instances": [inst.to_json() for inst in instances], **params.to_json()}
    return _run_cases(cases, params, cache, config)


def _coefs(params: ExperimentParams, k: int) -> tuple[float, ...]:
    if params.baseline_coefficients is None:
        return params.coefficient_grid
    return (params.baseline_coefficients[params.baseline_ks.index(k)],)


def _run_cases(cases: list, params: ExperimentParams, cache: AttributionCache | None, config: dict) -> ExperimentReport:
    for m in params.methods:
        if m != "wasd" and _method_k(m) is None:
            raise ValueError(f"unknown method {m!r}")
    params.explain.validate()
    cache = cache if cache is not None else AttributionCache()
    topk_methods = [m for m in params.methods if m != "wasd"]
    prefix_sets: dict[int, NeutralPrefixSet] = {}

    def prefixes_for(vocab_size: int) -> NeutralPrefixSet:
        if vocab_size not in prefix_sets:
            texts = params.prefix_texts or NEUTRAL_PREFIX_TEXTS
            prefix_sets[vocab_size] = NeutralPrefixSet.from_texts(texts, vocab_size)
        return prefix_sets[vocab_size]

    def eval_sample(model: ActivationModel, x: Prompt, ep: ExplainParams, base: int) -> NeighborhoodSample:
        if ep.max_edits is not None:
            return enumerate_neighborhood(x, ep.max_edits, ep.perturb, model.vocab_size)
        p = ep.perturb.with_seed(combine(base, _EVAL_SALT))
        if params.eval_samples is not None:
            p = dataclasses.replace(p, sample_count=params.eval_samples)
        return gen_neighborhood(x, p, model.vocab_size)

    def cell(ix):
        i, (model, x, ep, base) = ix
        x = model.check_prompt(x)
        original = model.forward(x).next_token
        ev = eval_sample(model, x, ep, base)
        out: dict = {"index": i, "prompt": list(x), "original_token": original}
        rules: dict[str, Rule] = {}
        if "wasd" in params.methods:
            res = explain(model, x, ep, cache)
            rules["wasd"] = res.rule
            out["wasd_search_precision"] = res.precision.value
            out["wasd_reached_tau"] = res.reached_tau
        # precision of each top-k rule for every candidate coefficient
        grid = {}
        for m in topk_methods:
            k = _method_k(m)
            for c in _coefs(params, k):
                r = topk_baseline_rule(model, x, ep.attributor, BaselineConfig(k, c), cache)
                grid[(m, c)] = (r, estimate_precision(model, x, r, ev, ep.acceptor, original).value)
        out["_grid"] = grid
        if "wasd" in rules:
            out["wasd_precision"] = estimate_precision(model, x, rules["wasd"], ev, ep.acceptor, original).value
            out["wasd_size"] = len(rules["wasd"])
        try:
            xp = neutral_prefix_perturb(model, x, prefixes_for(model.vocab_size), combine(base, _PREFIX_SALT))
        except NoNeutralPrefixError:
            xp = None
        out["prefixed_prompt"] = None if xp is None else list(xp)
        if xp is not None:
            if "wasd" in rules:
                res_p = explain(model, xp, ep, cache)
                out["wasd_instability"] = jaccard_instability(rules["wasd"], res_p.rule).value
            for m in topk_methods:
                k = _method_k(m)
                a = topk_baseline_rule(model, x, ep.attributor, BaselineConfig(k), cache)
                b = topk_baseline_rule(model, xp, ep.attributor, BaselineConfig(k), cache)
                out[f"{m}_instability"] = jaccard_instability(a, b).value
        return out

    cells = parallel_map(cell, list(enumerate(cases)), params.parallelism)

    chosen: dict[str, float] = {}
    for m in topk_methods:
        coefs = _coefs(params, _method_k(m))
        means = [(statistics.fmean(c["_grid"][(m, cf)][1] for c in cells), cf) for cf in coefs]
        chosen[m] = min(means, key=lambda t: (-t[0], t[1]))[1]

    rows = []
    for c in cells:
        grid = c.pop("_grid")
        for m in topk_methods:
            rule, prec = grid[(m, chosen[m])]
            c[f"{m}_precision"] = prec
            c[f"{m}_size"] = len(rule)
        rows.append(c)

    summary = {}
    for m in params.methods:
        prec = [r[f"{m}_precision"] for r in rows]
        inst = [r[f"{m}_instability"] for r in rows if f"{m}_instability" in r]
        size = [float(r[f"{m}_size"]) for r in rows]
        pm, pc = _mean_ci(prec)
        im, ic = _mean_ci(inst)
        sm, sc = _mean_ci(size)
        summary[m] = {
            "precision": pm, "precision_ci": pc,
            "instability": im, "instability_ci": ic,
            "size": sm, "size_ci": sc,
            "n": len(prec), "n_instability": len(inst),
        }
        if m in chosen:
            summary[m]["coefficient"] = chosen[m]
    excluded = sum(1 for r in rows if r["prefixed_prompt"] is None)
    return ExperimentReport(list(params.methods), summary, rows, config, excluded)
