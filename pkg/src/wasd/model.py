"""Activation models: forward passes with clamped neurons.

Two deterministic models are provided.  ``ToyTransformer`` is a small
decoder-only transformer whose MLP hidden units are the clampable neurons.
``PlantedModel`` is a synthetic model whose output is governed by a hidden
threshold rule, which makes the minimal sufficient rule known in advance.

Neurons are addressed by ``(layer, channel, pos_from_end)``; position 0 is the
final token, so prepending tokens to a prompt keeps final-token neuron
identities stable.
"""

from __future__ import annotations

import functools
import hashlib
import json
import math
from abc import ABC, abstractmethod
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import asdict, dataclass

import numpy as np

from .errors import (
    ConflictingInterventionError,
    ContextOverflowError,
    InvalidSpecError,
    UnknownNeuronError,
)
from .rng import combine, uniform_stream

Prompt = tuple[int, ...]


@functools.total_ordering
@dataclass(frozen=True)
class NeuronRef:
    layer: int
    channel: int
    pos_from_end: int = 0

    def sort_key(self) -> tuple[int, int, int]:
        return (self.layer, self.pos_from_end, self.channel)

    def __lt__(self, other: NeuronRef) -> bool:
        if not isinstance(other, NeuronRef):
            return NotImplemented
        return self.sort_key() < other.sort_key()

    def __str__(self) -> str:
        return f"L{self.layer} C{self.channel} P-{self.pos_from_end}"


@dataclass(frozen=True)
class Intervention:
    target: NeuronRef
    value: float

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError(f"intervention value must be finite, got {self.value}")


@dataclass
class ModelOutput:
    next_token: int
    logits: np.ndarray
    activations: dict[NeuronRef, float]


InterventionsLike = Iterable[Intervention] | Mapping[NeuronRef, float]


def normalize_interventions(interventions: InterventionsLike | None) -> dict[NeuronRef, float]:
    """Collapse interventions into ``{neuron: value}``.

    Repeating a neuron with the same value is tolerated; different values raise.
    """
    if interventions is None:
        return {}
    if isinstance(interventions, Mapping):
        items = [(k, float(v)) for k, v in interventions.items()]
    elif hasattr(interventions, "interventions"):
        items = [(iv.target, iv.value) for iv in interventions.interventions()]
    else:
        items = [(iv.target, float(iv.value)) for iv in interventions]
    out: dict[NeuronRef, float] = {}
    for ref, val in items:
        if not math.isfinite(val):
            raise ValueError(f"non-finite clamp value for {ref}")
        if ref in out and out[ref] != val:
            raise ConflictingInterventionError(f"conflicting clamps on {ref}: {out[ref]} vs {val}")
        out[ref] = val
    return out


class ActivationModel(ABC):
    """A next-token model with enumerable, clampable scalar neurons."""

    vocab_size: int
    max_context: int

    @abstractmethod
    def neurons(self, prompt_length: int) -> Sequence[NeuronRef]:
        """Clampable sites for a prompt of this length, in canonical order."""

    @abstractmethod
    def forward(self, x: Sequence[int], interventions: InterventionsLike | None = None) -> ModelOutput:
        ...

    @abstractmethod
    def to_spec(self) -> dict:
        """JSON-serialisable spec that rebuilds an identical model."""

    @functools.cached_property
    def fingerprint(self) -> str:
        blob = json.dumps(self.to_spec(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def check_prompt(self, x: Sequence[int]) -> Prompt:
        x = tuple(int(t) for t in x)
        if not x:
            raise ValueError("prompt must be non-empty")
        if len(x) > self.max_context:
            raise ContextOverflowError(f"prompt length {len(x)} exceeds context {self.max_context}")
        for t in x:
            if not 0 <= t < self.vocab_size:
                raise ValueError(f"token {t} outside vocabulary of size {self.vocab_size}")
        return x

    def enumerate_neurons(self, prompt_length: int) -> list[NeuronRef]:
        if not 1 <= prompt_length <= self.max_context:
            raise ValueError(f"invalid prompt length {prompt_length}")
        return list(self.neurons(prompt_length))

    def has_neuron(self, ref: NeuronRef, prompt_length: int) -> bool:
        return ref in set(self.neurons(prompt_length))

    def next_tokens(
        self,
        prompts: Sequence[Sequence[int]],
        interventions: InterventionsLike | None = None,
        skip_absent: bool = False,
    ) -> np.ndarray:
        """Greedy next token for each prompt under the same interventions.

        With ``skip_absent`` a clamp on a neuron the prompt does not have
        (e.g. a position beyond its start) is dropped for that prompt.
        """
        clamps = normalize_interventions(interventions)
        out = np.empty(len(prompts), dtype=np.int64)
        for i, x in enumerate(prompts):
            local = clamps
            if skip_absent:
                local = {r: v for r, v in clamps.items() if self.has_neuron(r, len(x))}
            out[i] = self.forward(x, local).next_token
        return out

    def readout(self, x: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        """Logits and activation vector (ordered like ``neurons``) without clamps."""
        out = self.forward(x)
        return out.logits, np.asarray([out.activations[r] for r in self.neurons(len(x))])

    def ablation_effects(self, x: Sequence[int], token: int, mask: np.ndarray | None = None) -> np.ndarray:
        """``logit[token](x) - logit[token](x | do(v := 0))`` for every neuron.

        Ordered like ``neurons(len(x))``.  With a boolean ``mask`` only the
        selected neurons are ablated; the rest report 0.  Subclasses may
        override with a batched implementation.
        """
        base = self.forward(x)
        ref_logit = base.logits[token]
        effects = np.zeros(len(base.activations))
        for i, ref in enumerate(self.neurons(len(x))):
            if base.activations[ref] == 0.0 or (mask is not None and not mask[i]):
                continue
            effects[i] = ref_logit - self.forward(x, {ref: 0.0}).logits[token]
        return effects


def _argmax(logits: np.ndarray) -> int:
    # np.argmax returns the first maximum, i.e. the lowest token id on ties
    return int(np.argmax(logits))


# --------------------------------------------------------------------------
# toy transformer


@dataclass(frozen=True)
class ToyTransformerConfig:
    vocab_size: int = 64
    layers: int = 2
    d_model: int = 16
    heads: int = 2
    mlp_hidden: int = 32
    max_context: int = 16
    seed: int = 0

    def validate(self) -> None:
        for name in ("vocab_size", "layers", "d_model", "heads", "mlp_hidden", "max_context"):
            if getattr(self, name) < 1:
                raise InvalidSpecError(f"{name} must be >= 1")
        if self.d_model % self.heads:
            raise InvalidSpecError("d_model must be divisible by heads")
        if not 0 <= self.seed < 2**64:
            raise InvalidSpecError("seed must be a 64-bit unsigned integer")


def _mm(a: np.ndarray, w: np.ndarray) -> np.ndarray:
    """(B, T, n) @ (n, m) as B separate matmuls.

    Broadcasting the weight forces one small matmul per batch row, so a
    prompt's result is bit-identical whatever else shares its batch.
    """
    return np.matmul(a, np.broadcast_to(w, (a.shape[0], *w.shape)))


def _layer_norm(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


@functools.lru_cache(maxsize=256)
def _toy_grid(layers: int, hidden: int, length: int) -> tuple[NeuronRef, ...]:
    return tuple(
        NeuronRef(layer, ch, p) for layer in range(layers) for p in range(length) for ch in range(hidden)
    )


class ToyTransformer(ActivationModel):
    """Pre-LayerNorm decoder-only transformer with ReLU MLPs.

    Weights are drawn from SplitMix64 streams: tensor number ``k`` uses seed
    ``combine(config.seed, k)`` and is filled in C order with
    ``(2u - 1) / sqrt(d_model)``.  Tensor numbering: 0 token embedding
    (V, d), 1 positional embedding (ctx, d), then per layer ``l`` at
    ``2 + 8l``: W_Q, W_K, W_V (heads, d, d_head), W_O (heads, d_head, d),
    W_in (d, H), b_in (H), W_out (H, d), b_out (d); finally the unembedding
    (d, V).  LayerNorms carry no learned parameters.

    Matrix products run per batch row (see ``_mm``) so a prompt's result does
    not depend on what else is in the batch.
    """

    def __init__(self, config: ToyTransformerConfig):
        config.validate()
        self.config = config
        self.vocab_size = config.vocab_size
        self.max_context = config.max_context
        d, h, hid = config.d_model, config.heads, config.mlp_hidden
        dh = d // h
        bound = 1.0 / math.sqrt(d)
        counter = iter(range(10**6))

        def draw(*shape: int) -> np.ndarray:
            n = int(np.prod(shape))
            u = uniform_stream(combine(config.seed, next(counter)), n)
            w = ((2.0 * u - 1.0) * bound).reshape(shape)
            w.flags.writeable = False
            return w

        self.W_E = draw(config.vocab_size, d)
        self.W_pos = draw(config.max_context, d)
        self.blocks = []
        for _ in range(config.layers):
            self.blocks.append(
                dict(
                    W_Q=draw(h, d, dh),
                    W_K=draw(h, d, dh),
                    W_V=draw(h, d, dh),
                    W_O=draw(h, dh, d),
                    W_in=draw(d, hid),
                    b_in=draw(hid),
                    W_out=draw(hid, d),
                    b_out=draw(d),
                )
            )
        self.W_U = draw(d, config.vocab_size)
        for blk in self.blocks:
            # (d, [q|k|v] x heads x d_head) and (heads x d_head, d) views for batched matmuls
            blk["W_QKV"] = np.concatenate(
                [blk[n].transpose(1, 0, 2).reshape(d, h * dh) for n in ("W_Q", "W_K", "W_V")], axis=1
            )
            blk["W_O_flat"] = blk["W_O"].reshape(h * dh, d)
        self._scale = 1.0 / math.sqrt(dh)

    def to_spec(self) -> dict:
        return {"kind": "toy", **asdict(self.config)}

    def neurons(self, prompt_length: int) -> tuple[NeuronRef, ...]:
        return _toy_grid(self.config.layers, self.config.mlp_hidden, prompt_length)

    def has_neuron(self, ref: NeuronRef, prompt_length: int) -> bool:
        c = self.config
        return 0 <= ref.layer < c.layers and 0 <= ref.channel < c.mlp_hidden and 0 <= ref.pos_from_end < prompt_length

    # -- core computation ---------------------------------------------------

    def _attn(self, x: np.ndarray, blk: dict) -> np.ndarray:
        B, T, _ = x.shape
        nh, dh = self.config.heads, self.config.d_model // self.config.heads
        qkv = _mm(_layer_norm(x), blk["W_QKV"])  # (B, T, 3 * nh * dh)
        qkv = qkv.reshape(B, T, 3, nh, dh).transpose(2, 0, 3, 1, 4)  # (3, B, nh, T, dh)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = np.matmul(q, k.transpose(0, 1, 3, 2)) * self._scale
        causal = np.tril(np.ones((T, T), dtype=bool))
        scores = np.where(causal, scores, -np.inf)
        scores = scores - scores.max(axis=-1, keepdims=True)
        w = np.exp(scores)
        w = w / w.sum(axis=-1, keepdims=True)
        z = np.matmul(w, v).transpose(0, 2, 1, 3).reshape(B, T, nh * dh)
        return x + _mm(z, blk["W_O_flat"])

    def _mlp_hidden(self, x: np.ndarray, blk: dict) -> np.ndarray:
        return np.maximum(_mm(_layer_norm(x), blk["W_in"]) + blk["b_in"], 0.0)

    def _mlp_out(self, x: np.ndarray, act: np.ndarray, blk: dict) -> np.ndarray:
        return x + _mm(act, blk["W_out"]) + blk["b_out"]

    def _unembed(self, x_last: np.ndarray) -> np.ndarray:
        return _mm(_layer_norm(x_last)[:, None, :], self.W_U)[:, 0, :]

    def _run(self, tokens: np.ndarray, clamps: Mapping[NeuronRef, float], keep: bool = False):
        """Forward a (B, T) batch with the same clamps applied to every row."""
        B, T = tokens.shape
        x = self.W_E[tokens] + self.W_pos[:T]
        acts, mids = [], []
        by_layer: dict[int, list[tuple[int, int, float]]] = {}
        for ref, val in clamps.items():
            by_layer.setdefault(ref.layer, []).append((T - 1 - ref.pos_from_end, ref.channel, val))
        for layer, blk in enumerate(self.blocks):
            x = self._attn(x, blk)
            act = self._mlp_hidden(x, blk)
            for pos, ch, val in by_layer.get(layer, ()):
                act[:, pos, ch] = val
            if keep:
                mids.append(x)
                acts.append(act)
            x = self._mlp_out(x, act, blk)
        return self._unembed(x[:, -1]), acts, mids

    def _check_clamps(self, clamps: Mapping[NeuronRef, float], n: int) -> None:
        for ref in clamps:
            if not self.has_neuron(ref, n):
                raise UnknownNeuronError(f"{ref} is not a neuron for prompt length {n}")

    # -- public API ---------------------------------------------------------

    def forward(self, x, interventions=None) -> ModelOutput:
        x = self.check_prompt(x)
        clamps = normalize_interventions(interventions)
        self._check_clamps(clamps, len(x))
        logits, acts, _ = self._run(np.asarray([x], dtype=np.int64), clamps, keep=True)
        vec = self._flatten(acts)
        activations = dict(zip(self.neurons(len(x)), vec.tolist()))
        return ModelOutput(_argmax(logits[0]), logits[0], activations)

    @staticmethod
    def _flatten(acts: list[np.ndarray]) -> np.ndarray:
        # (layer, abs_pos, ch) of batch row 0 -> neuron order (layer, pos_from_end, ch)
        return np.stack([a[0, ::-1, :] for a in acts]).reshape(-1)

    def readout(self, x):
        x = self.check_prompt(x)
        logits, acts, _ = self._run(np.asarray([x], dtype=np.int64), {}, keep=True)
        return logits[0], self._flatten(acts)

    def logits_batch(self, prompts, interventions=None, skip_absent: bool = False) -> list[np.ndarray]:
        clamps = normalize_interventions(interventions)
        groups: dict[int, list[int]] = {}
        checked = [self.check_prompt(x) for x in prompts]
        for i, x in enumerate(checked):
            groups.setdefault(len(x), []).append(i)
        out: list[np.ndarray | None] = [None] * len(checked)
        for T, idx in groups.items():
            if skip_absent:
                local = {r: v for r, v in clamps.items() if self.has_neuron(r, T)}
            else:
                self._check_clamps(clamps, T)
                local = clamps
            tokens = np.asarray([checked[i] for i in idx], dtype=np.int64)
            logits, _, _ = self._run(tokens, local)
            for row, i in enumerate(idx):
                out[i] = logits[row]
        return out

    def next_tokens(self, prompts, interventions=None, skip_absent=False) -> np.ndarray:
        logits = self.logits_batch(prompts, interventions, skip_absent)
        return np.asarray([_argmax(lg) for lg in logits], dtype=np.int64)

    def ablation_effects(self, x, token: int, mask: np.ndarray | None = None) -> np.ndarray:
        """Batched zero-ablation: each active neuron is zeroed in its own row.

        Rows resume from the cached residual stream of the clamped layer, so
        earlier layers are computed once.  Neurons that are already 0 have
        effect exactly 0 and are not re-run.
        """
        x = self.check_prompt(x)
        T = len(x)
        c = self.config
        base_logits, acts, mids = self._run(np.asarray([x], dtype=np.int64), {}, keep=True)
        ref_logit = base_logits[0, token]
        effects = np.zeros((c.layers, T, c.mlp_hidden))
        # mask arrives in neuron order (layer, pos_from_end, ch); flip to absolute positions
        keep = None if mask is None else np.asarray(mask, dtype=bool).reshape(c.layers, T, c.mlp_hidden)[:, ::-1, :]
        for layer in range(c.layers):
            live = acts[layer][0] != 0
            if keep is not None:
                live &= keep[layer]
            pos, ch = np.nonzero(live)
            if len(pos) == 0:
                continue
            R = len(pos)
            act = np.repeat(acts[layer], R, axis=0)
            act[np.arange(R), pos, ch] = 0.0
            h = self._mlp_out(np.repeat(mids[layer], R, axis=0), act, self.blocks[layer])
            for blk in self.blocks[layer + 1 :]:
                h = self._attn(h, blk)
                h = self._mlp_out(h, self._mlp_hidden(h, blk), blk)
            logits = self._unembed(h[:, -1])
            effects[layer, pos, ch] = ref_logit - logits[:, token]
        # reorder (layer, abs_pos, ch) -> (layer, pos_from_end, ch)
        return effects[:, ::-1, :].reshape(-1).copy()


def build_toy_transformer(config: ToyTransformerConfig | None = None) -> ToyTransformer:
    return ToyTransformer(config or ToyTransformerConfig())


# --------------------------------------------------------------------------
# planted model


@dataclass(frozen=True)
class PlantedModelSpec:
    vocab_size: int
    neuron_count: int
    planted_set: tuple[tuple[int, float], ...]
    target_token: int
    seed: int
    max_context: int = 64

    def __post_init__(self):
        object.__setattr__(
            self, "planted_set", tuple((int(i), float(t)) for i, t in self.planted_set)
        )

    def validate(self) -> None:
        if self.vocab_size < 2:
            raise InvalidSpecError("planted model needs at least 2 tokens")
        if self.neuron_count < 1 or self.max_context < 1:
            raise InvalidSpecError("neuron_count and max_context must be >= 1")
        if not 1 <= len(self.planted_set) <= self.neuron_count:
            raise InvalidSpecError("planted_set must hold between 1 and neuron_count neurons")
        idx = [i for i, _ in self.planted_set]
        if len(set(idx)) != len(idx):
            raise InvalidSpecError("planted neuron indices must be distinct")
        for i, theta in self.planted_set:
            if not 0 <= i < self.neuron_count:
                raise InvalidSpecError(f"planted index {i} out of range")
            if not 0.0 < theta < 1.0:
                raise InvalidSpecError(f"threshold {theta} not in (0, 1)")
        if not 0 <= self.target_token < self.vocab_size:
            raise InvalidSpecError("target_token outside vocabulary")


_FALLBACK_SALT = 0xFA11BAC4


class PlantedModel(ActivationModel):
    """Synthetic model with a known sufficient rule.

    Neuron ``i`` takes the i-th value of the uniform stream seeded with
    ``combine(seed, combine(*sorted(x)))``, so activations depend only on
    the token multiset of the prompt.  The model emits ``target_token`` iff
    every planted neuron ``s`` (clamped or not) is at least its threshold;
    otherwise it emits a hash of the full prompt into the other tokens.
    """

    def __init__(self, spec: PlantedModelSpec):
        spec.validate()
        self.spec = spec
        self.vocab_size = spec.vocab_size
        self.max_context = spec.max_context
        self._planted_idx = np.asarray([i for i, _ in spec.planted_set], dtype=np.int64)
        self._theta = np.asarray([t for _, t in spec.planted_set])
        self._refs = tuple(NeuronRef(0, i, 0) for i in range(spec.neuron_count))

    def to_spec(self) -> dict:
        d = asdict(self.spec)
        d["planted_set"] = [list(p) for p in self.spec.planted_set]
        return {"kind": "planted", **d}

    def neurons(self, prompt_length: int) -> tuple[NeuronRef, ...]:
        return self._refs

    def readout(self, x):
        x = self.check_prompt(x)
        act = self.natural_activations(x)
        logits = np.zeros(self.vocab_size)
        logits[self._decide(x, act)] = 1.0
        return logits, act

    def has_neuron(self, ref: NeuronRef, prompt_length: int) -> bool:
        return ref.layer == 0 and ref.pos_from_end == 0 and 0 <= ref.channel < self.spec.neuron_count

    def ground_truth_rule(self) -> dict[NeuronRef, float]:
        """Planted neurons and their thresholds (any clamp >= threshold suffices)."""
        return {NeuronRef(0, i, 0): t for i, t in self.spec.planted_set}

    def natural_activations(self, x: Sequence[int]) -> np.ndarray:
        ms = combine(*sorted(x))
        return uniform_stream(combine(self.spec.seed, ms), self.spec.neuron_count)

    def fallback_token(self, x: Sequence[int]) -> int:
        r = combine(self.spec.seed ^ _FALLBACK_SALT, *x) % (self.spec.vocab_size - 1)
        return r if r < self.spec.target_token else r + 1

    def _decide(self, x: Prompt, act: np.ndarray) -> int:
        if np.all(act[self._planted_idx] >= self._theta):
            return self.spec.target_token
        return self.fallback_token(x)

    def _apply(self, x: Prompt, clamps: Mapping[NeuronRef, float], strict: bool) -> np.ndarray:
        act = self.natural_activations(x)
        for ref, val in clamps.items():
            if not self.has_neuron(ref, len(x)):
                if strict:
                    raise UnknownNeuronError(f"{ref} is not a neuron of this planted model")
                continue
            act[ref.channel] = val
        return act

    def forward(self, x, interventions=None) -> ModelOutput:
        x = self.check_prompt(x)
        act = self._apply(x, normalize_interventions(interventions), strict=True)
        tok = self._decide(x, act)
        logits = np.zeros(self.vocab_size)
        logits[tok] = 1.0
        activations = {NeuronRef(0, i, 0): float(a) for i, a in enumerate(act)}
        return ModelOutput(tok, logits, activations)

    def next_tokens(self, prompts, interventions=None, skip_absent=False) -> np.ndarray:
        clamps = normalize_interventions(interventions)
        out = np.empty(len(prompts), dtype=np.int64)
        for i, x in enumerate(prompts):
            x = self.check_prompt(x)
            out[i] = self._decide(x, self._apply(x, clamps, strict=not skip_absent))
        return out


def build_planted_model(spec: PlantedModelSpec) -> PlantedModel:
    return PlantedModel(spec)


def enumerate_neurons(model: ActivationModel, prompt_length: int) -> list[NeuronRef]:
    return model.enumerate_neurons(prompt_length)


def forward(model: ActivationModel, x, interventions=None) -> ModelOutput:
    return model.forward(x, interventions)


def model_from_spec(spec: Mapping) -> ActivationModel:
    spec = dict(spec)
    kind = spec.pop("kind", None)
    if kind == "toy":
        return ToyTransformer(ToyTransformerConfig(**spec))
    if kind == "planted":
        spec["planted_set"] = tuple(tuple(p) for p in spec["planted_set"])
        return PlantedModel(PlantedModelSpec(**spec))
    raise InvalidSpecError(f"unknown model kind {kind!r}")
