"""Weight extraction: per-neuron activation and contribution to the output logit.

Two attributors stand in for a replacement-model attribution graph:

``ablation``
    contribution(v) = logit_t(x) - logit_t(x | do(v := 0)), where t is the
    explained token (f(x) of the original prompt unless given).
``planted_exact``
    planted models only.  A planted neuron whose natural activation is at
    least ``theta - 0.25`` scores ``1 + (activation - theta)``; every other
    neuron scores 0.
"""

from __future__ import annotations

import threading
from collections.abc import Sequence
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .model import ActivationModel, NeuronRef, PlantedModel

PLANTED_MARGIN = 0.25


class AttributorKind(str, Enum):
    ABLATION = "ablation"
    PLANTED_EXACT = "planted_exact"


@dataclass(frozen=True)
class AttributionRecord:
    neuron: NeuronRef
    activation: float
    contribution: float


AttributionMap = dict[NeuronRef, AttributionRecord]


@dataclass(frozen=True)
class AttributionArrays:
    """Array form of a weight-extraction result, aligned with ``neurons``."""

    neurons: tuple[NeuronRef, ...]
    activations: np.ndarray
    contributions: np.ndarray

    def to_map(self) -> AttributionMap:
        return {
            ref: AttributionRecord(ref, a, c)
            for ref, a, c in zip(self.neurons, self.activations.tolist(), self.contributions.tolist())
        }


def _planted_contributions(model: PlantedModel, activations: np.ndarray) -> np.ndarray:
    out = np.zeros(len(activations))
    for ref, theta in model.ground_truth_rule().items():
        a = activations[ref.channel]
        if a >= theta - PLANTED_MARGIN:
            out[ref.channel] = 1.0 + (a - theta)
    return out


def wt_ext_arrays(
    model: ActivationModel,
    x: Sequence[int],
    kind: AttributorKind | str = AttributorKind.ABLATION,
    token: int | None = None,
    top_activations: int | None = None,
) -> AttributionArrays:
    """Array form of ``wt_ext``.

    ``top_activations`` restricts ablation to that many most active neurons
    (ties by neuron order); the others report contribution 0.
    """
    kind = AttributorKind(kind)
    x = model.check_prompt(x)
    if kind is AttributorKind.PLANTED_EXACT and not isinstance(model, PlantedModel):
        raise TypeError("planted_exact attribution requires a planted model")
    logits, acts = model.readout(x)
    if token is None:
        token = int(np.argmax(logits))
    if kind is AttributorKind.ABLATION:
        mask = None
        if top_activations is not None and top_activations < len(acts):
            mask = np.zeros(len(acts), dtype=bool)
            mask[np.argsort(-acts, kind="stable")[:top_activations]] = True
        contrib = model.ablation_effects(x, token, mask)
    else:
        contrib = _planted_contributions(model, acts)
    return AttributionArrays(tuple(model.neurons(len(x))), acts, contrib)


def wt_ext(
    model: ActivationModel,
    x: Sequence[int],
    kind: AttributorKind | str = AttributorKind.ABLATION,
    token: int | None = None,
) -> AttributionMap:
    """Activation and contribution for every neuron of ``model`` on ``x``.

    ``token`` fixes the logit being attributed; by default it is the model's
    own prediction on ``x``.
    """
    return wt_ext_arrays(model, x, kind, token).to_map()


class AttributionCache:
    """Memo for weight extraction keyed on (model fingerprint, prompt, kind, token)."""

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self.hits = 0
        self.misses = 0
        self._store: dict[tuple, AttributionArrays] = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._store)

    def arrays(self, model, x, kind, token=None, top_activations=None) -> AttributionArrays:
        if not self.enabled:
            return wt_ext_arrays(model, x, kind, token, top_activations)
        key = (model.fingerprint, tuple(int(t) for t in x), AttributorKind(kind).value, token, top_activations)
        with self._lock:
            hit = self._store.get(key)
            if hit is not None:
                self.hits += 1
                return hit
        value = wt_ext_arrays(model, x, kind, token, top_activations)
        with self._lock:
            self.misses += 1
            return self._store.setdefault(key, value)


def cached_wt_ext(
    model: ActivationModel,
    x: Sequence[int],
    kind: AttributorKind | str = AttributorKind.ABLATION,
    cache: AttributionCache | None = None,
    token: int | None = None,
) -> AttributionMap:
    if cache is None:
        return wt_ext(model, x, kind, token)
    return cache.arrays(model, x, kind, token).to_map()


def attribution_to_json(amap: AttributionMap) -> list[dict]:
    return [
        {
            "layer": r.neuron.layer,
            "channel": r.neuron.channel,
            "pos_from_end": r.neuron.pos_from_end,
            "activation": r.activation,
            "contribution": r.contribution,
        }
        for r in (amap[k] for k in sorted(amap))
    ]


def attribution_from_json(rows: list[dict]) -> AttributionMap:
    out = {}
    for row in rows:
        ref = NeuronRef(row["layer"], row["channel"], row["pos_from_end"])
        out[ref] = AttributionRecord(ref, float(row["activation"]), float(row["contribution"]))
    return out
