"""Candidate predicates from neighborhood activation statistics."""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from .attribution import AttributionArrays, AttributionCache, AttributorKind
from .errors import NeighborhoodError
from .model import ActivationModel, NeuronRef
from .perturb import NeighborhoodSample


@dataclass(frozen=True)
class Predicate:
    """Clamp ``neuron`` to ``value``."""

    neuron: NeuronRef
    value: float

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError(f"predicate value must be finite, got {self.value}")

    def __str__(self) -> str:
        return f"{self.neuron} := {self.value:.6g}"


@dataclass(frozen=True)
class CandidatePredicate:
    predicate: Predicate
    mean_contribution: float
    max_activation: float = 0.0
    observations: int = 0

    @property
    def neuron(self) -> NeuronRef:
        return self.predicate.neuron

    def to_json(self) -> dict:
        n = self.predicate.neuron
        return {
            "layer": n.layer,
            "channel": n.channel,
            "pos_from_end": n.pos_from_end,
            "value": self.predicate.value,
            "mean_contribution": self.mean_contribution,
            "max_activation": self.max_activation,
            "observations": self.observations,
        }

    @classmethod
    def from_json(cls, d: dict) -> CandidatePredicate:
        ref = NeuronRef(d["layer"], d["channel"], d["pos_from_end"])
        return cls(Predicate(ref, float(d["value"])), float(d["mean_contribution"]),
                   float(d.get("max_activation", 0.0)), int(d.get("observations", 0)))


@dataclass
class ActivationStats:
    """Activations and contributions observed across a neighborhood.

    Stored per prompt length, since the neuron grid depends only on length:
    ``blocks[n] = (neurons, activation rows, contribution rows)``.
    """

    blocks: dict[int, tuple[tuple[NeuronRef, ...], list[np.ndarray], list[np.ndarray]]] = field(
        default_factory=dict
    )

    def add(self, length: int, arrays: AttributionArrays) -> None:
        block = self.blocks.setdefault(length, (arrays.neurons, [], []))
        block[1].append(arrays.activations)
        block[2].append(arrays.contributions)

    def _series(self, ref: NeuronRef, which: int) -> list[float]:
        out: list[float] = []
        for length in sorted(self.blocks):
            refs, *rows = self.blocks[length]
            if ref in refs:
                j = refs.index(ref)
                out.extend(float(r[j]) for r in rows[which])
        return out

    def activations_of(self, ref: NeuronRef) -> list[float]:
        return self._series(ref, 0)

    def contributions_of(self, ref: NeuronRef) -> list[float]:
        return self._series(ref, 1)

    def summary(self) -> dict[NeuronRef, tuple[float, float, int]]:
        """``{neuron: (max activation, mean contribution, observations)}``."""
        acc: dict[NeuronRef, list] = {}
        for length in sorted(self.blocks):
            refs, acts, contribs = self.blocks[length]
            a_max = np.max(np.stack(acts), axis=0).tolist()
            c_sum = np.sum(np.stack(contribs), axis=0).tolist()
            n = len(acts)
            for ref, am, cs in zip(refs, a_max, c_sum):
                cur = acc.get(ref)
                if cur is None:
                    acc[ref] = [am, cs, n]
                else:
                    cur[0] = max(cur[0], am)
                    cur[1] += cs
                    cur[2] += n
        return {ref: (am, cs / n, n) for ref, (am, cs, n) in acc.items()}


def candidate_order(c: CandidatePredicate):
    return (-c.mean_contribution, c.neuron.sort_key())


def sort_candidates(cands: Sequence[CandidatePredicate]) -> list[CandidatePredicate]:
    """Descending mean contribution, ties by neuron order."""
    return sorted(cands, key=candidate_order)


def collect_stats(
    model: ActivationModel,
    sample: NeighborhoodSample,
    kind: AttributorKind | str,
    token: int,
    cache: AttributionCache | None = None,
    top_activations: int | None = None,
) -> ActivationStats:
    if len(sample) == 0:
        raise NeighborhoodError("empty neighborhood")
    stats = ActivationStats()
    local = cache if cache is not None else AttributionCache()
    for xp in sample.prompts:
        stats.add(len(xp), local.arrays(model, xp, kind, token, top_activations))
    return stats


def predicates_from_stats(stats: ActivationStats, lam: float) -> list[CandidatePredicate]:
    if not lam > 0:
        raise ValueError("lambda must be > 0")
    out = [
        CandidatePredicate(Predicate(ref, a_max * lam), c_mean, a_max, n)
        for ref, (a_max, c_mean, n) in stats.summary().items()
    ]
    return sort_candidates(out)


def generate_predicates(
    model: ActivationModel,
    x: Sequence[int],
    sample: NeighborhoodSample,
    kind: AttributorKind | str = AttributorKind.ABLATION,
    lam: float = 6.5,
    cache: AttributionCache | None = None,
    top_activations: int | None = None,
) -> list[CandidatePredicate]:
    """One candidate per neuron observed in the neighborhood.

    The clamp value is the neuron's largest activation over the neighborhood
    times ``lam``; the ranking key is its mean contribution to the logit of
    f(x).  Neurons missing from a shortened neighbor are simply not observed
    there.  ``top_activations`` is the optional ablation filter of
    ``wt_ext_arrays``.
    """
    if not lam > 0:
        raise ValueError("lambda must be > 0")
    token = model.forward(x).next_token
    stats = collect_stats(model, sample, kind, token, cache, top_activations)
    return predicates_from_stats(stats, lam)
