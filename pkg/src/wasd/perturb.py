"""Prompt neighborhoods: seeded edit sampling, exact enumeration, neutral prefixes.

Each unprotected position is edited independently with probability
``per_position_edit_prob``; an edit is a deletion or a replacement, picked by
the delete/replace weights.  Replacements draw uniformly from the pool minus
the current token (a pool holding only the current token leaves it as is).

``enumerate_neighborhood`` lists every prompt reachable with at most
``max_edits`` edits together with its probability under that same process,
conditioned on the edit count bound (and on the result being non-empty), so
precision computed on it is the exact expectation that sampling estimates.
"""

from __future__ import annotations

import re
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import NeighborhoodError, NoNeutralPrefixError
from .model import ActivationModel, Prompt
from .rng import combine

DEFAULT_ENUMERATION_BOUND = 20_000

NEUTRAL_PREFIX_TEXTS = (
    "As we all know, ",
    "Note that, ",
    "In fact, ",
    "Fact: ",
    "Text: ",
    "Input: ",
)


@dataclass(frozen=True)
class PerturbParams:
    per_position_edit_prob: float = 0.3
    delete_weight: float = 0.5
    replace_weight: float = 0.5
    protect_last_k: int = 1
    replacement_pool: tuple[int, ...] | None = None
    sample_count: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.replacement_pool is not None:
            object.__setattr__(self, "replacement_pool", tuple(int(t) for t in self.replacement_pool))

    def validate(self) -> None:
        if not 0.0 <= self.per_position_edit_prob <= 1.0:
            raise ValueError("per_position_edit_prob must lie in [0, 1]")
        if self.delete_weight < 0 or self.replace_weight < 0:
            raise ValueError("edit weights must be non-negative")
        if self.delete_weight + self.replace_weight <= 0:
            raise ValueError("delete_weight and replace_weight cannot both be zero")
        if self.protect_last_k < 0:
            raise ValueError("protect_last_k must be >= 0")
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")
        if self.replacement_pool is not None and not self.replacement_pool:
            raise ValueError("replacement_pool, when given, must be non-empty")

    def pool(self, vocab_size: int) -> tuple[int, ...]:
        if self.replacement_pool is None:
            return tuple(range(vocab_size))
        return tuple(sorted(set(self.replacement_pool)))

    def with_seed(self, seed: int) -> PerturbParams:
        return PerturbParams(**{**asdict(self), "seed": seed})


@dataclass(frozen=True)
class NeighborhoodSample:
    """A frozen list of neighbor prompts.

    ``weights`` is ``None`` for Monte Carlo draws (each prompt counts once)
    and holds exact probabilities for an enumerated neighborhood.
    """

    origin: Prompt
    prompts: tuple[Prompt, ...]
    weights: tuple[float, ...] | None = None
    params: PerturbParams = field(default_factory=PerturbParams)
    max_edits: int | None = None

    @property
    def exact(self) -> bool:
        return self.weights is not None

    def __len__(self) -> int:
        return len(self.prompts)

    def head(self, n: int) -> NeighborhoodSample:
        """First ``n`` prompts (Monte Carlo samples only)."""
        if self.exact:
            raise ValueError("cannot truncate an enumerated neighborhood")
        return NeighborhoodSample(self.origin, self.prompts[:n], None, self.params, self.max_edits)

    def to_json(self) -> dict:
        return {
            "origin": list(self.origin),
            "prompts": [list(p) for p in self.prompts],
            "weights": None if self.weights is None else list(self.weights),
            "exact": self.exact,
            "max_edits": self.max_edits,
            "params": params_to_json(self.params),
        }

    @classmethod
    def from_json(cls, d: dict) -> NeighborhoodSample:
        return cls(
            origin=tuple(d["origin"]),
            prompts=tuple(tuple(p) for p in d["prompts"]),
            weights=None if d.get("weights") is None else tuple(d["weights"]),
            params=params_from_json(d["params"]),
            max_edits=d.get("max_edits"),
        )


def params_to_json(p: PerturbParams) -> dict:
    d = asdict(p)
    if d["replacement_pool"] is not None:
        d["replacement_pool"] = list(d["replacement_pool"])
    return d


def params_from_json(d: dict) -> PerturbParams:
    return PerturbParams(**d)


def _check_origin(x: Sequence[int], params: PerturbParams) -> Prompt:
    params.validate()
    x = tuple(int(t) for t in x)
    if len(x) <= params.protect_last_k:
        raise NeighborhoodError(
            f"prompt of length {len(x)} needs more than protect_last_k={params.protect_last_k} tokens"
        )
    return x


def _draw_one(x: Prompt, params: PerturbParams, pool: tuple[int, ...], rng: np.random.Generator) -> Prompt:
    n_free = len(x) - params.protect_last_k
    p_delete = params.delete_weight / (params.delete_weight + params.replace_weight)
    out: list[int] = []
    for i, tok in enumerate(x):
        if i >= n_free or rng.random() >= params.per_position_edit_prob:
            out.append(tok)
            continue
        if rng.random() < p_delete:
            continue
        choices = [t for t in pool if t != tok]
        if not choices:
            out.append(tok)
            continue
        out.append(choices[min(int(rng.random() * len(choices)), len(choices) - 1)])
    return tuple(out)


def gen_neighborhood(x: Sequence[int], params: PerturbParams, vocab_size: int) -> NeighborhoodSample:
    """Draw ``params.sample_count`` i.i.d. neighbors of ``x``.

    Only ``Generator.random()`` is consumed, which keeps the stream stable
    across numpy versions.
    """
    x = _check_origin(x, params)
    pool = params.pool(vocab_size)
    rng = np.random.default_rng(params.seed)
    prompts = []
    while len(prompts) < params.sample_count:
        cand = _draw_one(x, params, pool, rng)
        if cand:
            prompts.append(cand)
    return NeighborhoodSample(x, tuple(prompts), None, params)


def _position_outcomes(tok: int, params: PerturbParams, pool: tuple[int, ...]):
    """(token or None for deletion, probability, is_edit) per outcome at one position."""
    p = params.per_position_edit_prob
    wsum = params.delete_weight + params.replace_weight
    choices = [t for t in pool if t != tok]
    p_keep = 1.0 - p
    out = []
    p_del = p * params.delete_weight / wsum
    p_rep = p * params.replace_weight / wsum
    if not choices:
        p_keep += p_rep
    out.append((tok, p_keep, False))
    if p_del > 0:
        out.append((None, p_del, True))
    if choices and p_rep > 0:
        for t in choices:
            out.append((t, p_rep / len(choices), True))
    return out


def count_neighborhood(x: Sequence[int], max_edits: int, params: PerturbParams, vocab_size: int) -> int:
    """Number of edit paths (before de-duplication) within ``max_edits``."""
    x = _check_origin(x, params)
    pool = params.pool(vocab_size)
    n_free = len(x) - params.protect_last_k
    # ways[j] = number of outcome tuples with exactly j edits so far
    ways = [1] + [0] * max_edits
    for tok in x[:n_free]:
        n_edit = sum(1 for _, _, e in _position_outcomes(tok, params, pool) if e)
        new = [0] * (max_edits + 1)
        for j, w in enumerate(ways):
            if not w:
                continue
            new[j] += w
            if j + 1 <= max_edits:
                new[j + 1] += w * n_edit
        ways = new
    return sum(ways)


def enumerate_neighborhood(
    x: Sequence[int],
    max_edits: int,
    params: PerturbParams,
    vocab_size: int,
    bound: int = DEFAULT_ENUMERATION_BOUND,
) -> NeighborhoodSample:
    """All distinct prompts within ``max_edits`` edits, with exact probabilities."""
    if max_edits < 0:
        raise ValueError("max_edits must be >= 0")
    x = _check_origin(x, params)
    total = count_neighborhood(x, max_edits, params, vocab_size)
    if total > bound:
        raise NeighborhoodError(f"enumeration needs {total} prompts, bound is {bound}")
    pool = params.pool(vocab_size)
    n_free = len(x) - params.protect_last_k
    suffix = x[n_free:]
    per_pos = [_position_outcomes(tok, params, pool) for tok in x[:n_free]]

    mass: dict[Prompt, float] = {}

    def walk(i: int, acc: tuple[int, ...], prob: float, edits: int) -> None:
        if i == n_free:
            prompt = acc + suffix
            if prompt and prob > 0:
                mass[prompt] = mass.get(prompt, 0.0) + prob
            return
        for tok, p, is_edit in per_pos[i]:
            if is_edit and edits == max_edits:
                continue
            walk(i + 1, acc if tok is None else acc + (tok,), prob * p, edits + is_edit)

    walk(0, (), 1.0, 0)
    if not mass:
        raise NeighborhoodError("enumerated neighborhood is empty")
    z = sum(mass.values())
    prompts = tuple(mass)
    weights = tuple(mass[p] / z for p in prompts)
    return NeighborhoodSample(x, prompts, weights, params, max_edits)


# --------------------------------------------------------------------------
# neutral prefixes

_WORD = re.compile(r"\w+|[^\w\s]")
_TOKEN_SALT = 0x70CE


def tokenize(text: str, vocab_size: int) -> tuple[int, ...]:
    """Toy tokenizer: words and punctuation hashed into the vocabulary."""
    return tuple(combine(_TOKEN_SALT, *w.encode("utf-8")) % vocab_size for w in _WORD.findall(text))


@dataclass(frozen=True)
class NeutralPrefixSet:
    prefixes: tuple[tuple[int, ...], ...]
    texts: tuple[str, ...] | None = None

    def __post_init__(self):
        if not self.prefixes:
            raise ValueError("need at least one neutral prefix")
        if any(len(p) == 0 for p in self.prefixes):
            raise ValueError("neutral prefixes must be non-empty")

    @classmethod
    def from_texts(cls, texts: Sequence[str], vocab_size: int) -> NeutralPrefixSet:
        return cls(tuple(tokenize(t, vocab_size) for t in texts), tuple(texts))

    @classmethod
    def default(cls, vocab_size: int) -> NeutralPrefixSet:
        return cls.from_texts(NEUTRAL_PREFIX_TEXTS, vocab_size)

    @classmethod
    def from_file(cls, path: str | Path, vocab_size: int) -> NeutralPrefixSet:
        lines = [ln.rstrip("\n") for ln in Path(path).read_text(encoding="utf-8").splitlines()]
        return cls.from_texts([ln for ln in lines if ln.strip()], vocab_size)


def neutral_prefix_perturb(
    model: ActivationModel, x: Sequence[int], prefixes: NeutralPrefixSet, seed: int
) -> Prompt:
    """Prepend the first prefix (in seeded random order) that keeps f(x).

    Prefixes that would overflow the context are skipped.
    """
    x = model.check_prompt(x)
    target = model.forward(x).next_token
    keys = np.random.default_rng(seed).random(len(prefixes.prefixes))
    for i in np.argsort(keys, kind="stable"):
        cand = tuple(prefixes.prefixes[i]) + x
        if len(cand) > model.max_context:
            continue
        if model.forward(cand).next_token == target:
            return cand
    raise NoNeutralPrefixError(f"no neutral prefix preserves the output for prompt {list(x)}")
