"""Seeded benchmark suites: planted-rule instances and toy-transformer prompts."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import PlantedModel, PlantedModelSpec, Prompt
from .perturb import PerturbParams, enumerate_neighborhood
from .rng import combine

# expected number of enumerated neighbors that satisfy the planted rule by
# chance before rejection; keeps each partial rule informative for the search
_JOINT_RATE = 1.0


@dataclass(frozen=True)
class PlantedInstance:
    spec: PlantedModelSpec
    prompt: Prompt
    perturb: PerturbParams
    max_edits: int

    def model(self) -> PlantedModel:
        return PlantedModel(self.spec)

    def to_json(self) -> dict:
        from .perturb import params_to_json

        return {
            "model": PlantedModel(self.spec).to_spec(),
            "prompt": list(self.prompt),
            "perturb": params_to_json(self.perturb),
            "max_edits": self.max_edits,
        }

    @classmethod
    def from_json(cls, d: dict) -> PlantedInstance:
        from .model import model_from_spec
        from .perturb import params_from_json

        model = model_from_spec(d["model"])
        return cls(model.spec, tuple(d["prompt"]), params_from_json(d["perturb"]), int(d["max_edits"]))


def _pick(rng: np.random.Generator, n: int) -> int:
    return min(int(rng.random() * n), n - 1)


def make_planted_instance(
    seed: int,
    vocab_size: int = 16,
    neuron_range: tuple[int, int] = (6, 12),
    rule_sizes: tuple[int, ...] = (1, 2, 3),
    prompt_length: int = 5,
    max_edits: int = 1,
    max_tries: int = 200_000,
) -> PlantedInstance:
    """Rejection-sample a planted model and prompt.

    Accepted instances satisfy:

    * the prompt meets every planted threshold naturally, so f(x) is the
      target token;
    * no other enumerated neighbor meets all of them;
    * for rules of size k >= 2, every (k-1)-subset of the planted thresholds
      is met naturally by at least one neighbor, so each partial rule has
      measurably higher precision than the one before it.
    """
    rng = np.random.default_rng(seed)
    n_neurons = neuron_range[0] + _pick(rng, neuron_range[1] - neuron_range[0] + 1)
    k = rule_sizes[_pick(rng, len(rule_sizes))]
    keys = rng.random(n_neurons)
    planted = sorted(int(i) for i in np.argsort(keys, kind="stable")[:k])
    target = _pick(rng, vocab_size)
    model_seed = combine(0x91A7, seed)
    perturb = PerturbParams(sample_count=1000, seed=combine(0x5EED, seed))

    probe = tuple(_pick(rng, vocab_size) for _ in range(prompt_length))
    n_nb = len(enumerate_neighborhood(probe, max_edits, perturb, vocab_size))
    q = (_JOINT_RATE / n_nb) ** (1.0 / k)
    thetas = [round(1.0 - q * (0.8 + 0.4 * rng.random()), 6) for _ in planted]
    spec = PlantedModelSpec(vocab_size, n_neurons, tuple(zip(planted, thetas)), target, model_seed)
    model = PlantedModel(spec)
    idx = np.asarray(planted)
    th = np.asarray(thetas)

    for _ in range(max_tries):
        x = tuple(_pick(rng, vocab_size) for _ in range(prompt_length))
        if not np.all(model.natural_activations(x)[idx] >= th):
            continue
        nb = enumerate_neighborhood(x, max_edits, perturb, vocab_size)
        met = np.asarray([model.natural_activations(p)[idx] >= th for p in nb.prompts if p != x])
        if met.all(axis=1).any():
            continue
        if k >= 2 and not all(np.delete(met, j, axis=1).all(axis=1).any() for j in range(k)):
            continue
        return PlantedInstance(spec, x, perturb, max_edits)
    raise RuntimeError(f"no planted instance found for seed {seed}")


def build_planted_suite(n: int = 50, seed: int = 0) -> list[PlantedInstance]:
    return [make_planted_instance(combine(seed, i)) for i in range(n)]


def save_planted_suite(instances: list[PlantedInstance], path: str | Path) -> None:
    data = {"schema_version": 1, "kind": "planted_suite", "instances": [i.to_json() for i in instances]}
    Path(path).write_text(json.dumps(data, indent=1) + "\n", encoding="utf-8")


def load_planted_suite(path: str | Path) -> list[PlantedInstance]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return [PlantedInstance.from_json(d) for d in data["instances"]]


def toy_prompt_suite(
    n: int, seed: int, vocab_size: int = 64, length_range: tuple[int, int] = (6, 8)
) -> list[Prompt]:
    """``n`` uniformly random prompts with lengths in ``length_range``."""
    rng = np.random.default_rng(seed)
    lo, hi = length_range
    out = []
    for _ in range(n):
        length = lo + _pick(rng, hi - lo + 1)
        out.append(tuple(_pick(rng, vocab_size) for _ in range(length)))
    return out
