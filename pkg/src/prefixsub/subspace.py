"""
Simplexes of prefix parameterizations and prediction heads.

A :class:`PrefixSimplex` holds ``n`` independently initialized vertices. Each
vertex owns an embedding sequence ``E_i`` and two reparameterization MLPs
(keys and values) whose stacked outputs give every layer's prefixes at once.
Models are drawn from the simplex with convex weights; the weights are
sampled independently per observation, per layer and per key/value slot,
and once per observation for the head.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .errors import InputError, ShapeError
from .model import Encoder, ModelConfig, PredictionHead, PrefixPair, predict
from .tensor import Tensor
from .tokenizer import Batch

PREFIX_STREAM = 1
HEAD_STREAM = 2
PLAN_STREAM = 3
SLOTS = ("key", "value")


def sample_weights(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw from the (n-1)-simplex: normalized standard exponentials."""
    if n < 1:
        raise InputError("vertex count must be >= 1")
    e = rng.standard_exponential(n)
    return e / e.sum()


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))


@dataclass
class SamplePlan:
    """Convex weights for one batch.

    ``prefix`` has shape (B, num_layers, 2, n_prefix) with slot 0 = keys and
    slot 1 = values; ``head`` has shape (B, n_head).
    """

    prefix: np.ndarray
    head: np.ndarray

    def __len__(self) -> int:
        return self.prefix.shape[0]

    @classmethod
    def constant(cls, batch_size: int, num_layers: int, prefix_alpha, head_alpha) -> "SamplePlan":
        prefix_alpha = np.asarray(prefix_alpha, dtype=np.float64)
        head_alpha = np.asarray(head_alpha, dtype=np.float64)
        return cls(prefix=np.broadcast_to(prefix_alpha, (batch_size, num_layers, 2, prefix_alpha.size)).copy(),
                   head=np.broadcast_to(head_alpha, (batch_size, head_alpha.size)).copy())

    @classmethod
    def uniform(cls, batch_size: int, num_layers: int, n_prefix: int, n_head: int) -> "SamplePlan":
        return cls.constant(batch_size, num_layers, np.full(n_prefix, 1.0 / n_prefix), np.full(n_head, 1.0 / n_head))


def draw_plan(keys: Iterable[Sequence[int]], seed: int, num_layers: int, n_prefix: int,
              n_head: int) -> SamplePlan:
    """Draw one plan row per observation key.

    Each key (e.g. ``(epoch, row)``) seeds its own stream, so a row's weights do
    not depend on which batch it lands in.
    """
    prefix_rows, head_rows = [], []
    for key in keys:
        rng = _stream(seed, PLAN_STREAM, *key)
        prefix_rows.append([[sample_weights(n_prefix, rng) for _ in SLOTS] for _ in range(num_layers)])
        head_rows.append(sample_weights(n_head, rng))
    return SamplePlan(prefix=np.asarray(prefix_rows, dtype=np.float64).reshape(-1, num_layers, 2, n_prefix),
                      head=np.asarray(head_rows, dtype=np.float64).reshape(-1, n_head))


class PrefixVertex:
    """Embedding sequence plus key/value reparameterization MLPs for one vertex."""

    def __init__(self, params: dict[str, Tensor], config: ModelConfig):
        self.params = params
        self.config = config

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator) -> "PrefixVertex":
        d, hidden, out = config.d_model, 2 * config.d_model, config.num_layers * config.d_model

        def uniform(fan_in, *shape):
            bound = 1.0 / np.sqrt(fan_in)
            return T.parameter(rng.uniform(-bound, bound, size=shape))

        params = {"embedding": T.parameter(rng.normal(0.0, 0.02, size=(config.prefix_len, d)))}
        for slot in SLOTS:
            params[f"{slot}.w1"] = uniform(d, d, hidden)
            params[f"{slot}.b1"] = uniform(d, hidden)
            params[f"{slot}.w2"] = uniform(hidden, hidden, out)
            params[f"{slot}.b2"] = uniform(hidden, out)
        return cls(params, config)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def reparam(self, slot: str) -> Tensor:
        """MLP_slot(E): shape (prefix_len, num_layers * d_model)."""
        p = self.params
        h = T.tanh(T.matmul(p["embedding"], p[f"{slot}.w1"]) + p[f"{slot}.b1"])
        return T.matmul(h, p[f"{slot}.w2"]) + p[f"{slot}.b2"]

    def prefixes(self) -> list[PrefixPair]:
        cfg = self.config
        P, Lyr, d = cfg.prefix_len, cfg.num_layers, cfg.d_model
        stacked = [self.reparam(slot).reshape(P, Lyr, d).transpose(1, 0, 2) for slot in SLOTS]
        return [PrefixPair(stacked[0][l], stacked[1][l]) for l in range(Lyr)]


def init_prefix_vertex(config: ModelConfig, seed: int, index: int = 0) -> PrefixVertex:
    """Standard prefix-tuning initialization (vertex ``index`` of a seeded simplex)."""
    return PrefixVertex.init(config, _stream(seed, PREFIX_STREAM, index))


def init_head(config: ModelConfig, seed: int, index: int = 0) -> PredictionHead:
    return PredictionHead.init(config, _stream(seed, HEAD_STREAM, index))


class PrefixSimplex:
    def __init__(self, vertices: list[PrefixVertex], config: ModelConfig):
        if not vertices:
            raise InputError("a simplex needs at least one vertex")
        self.vertices = vertices
        self.config = config
        for i, v in enumerate(vertices):
            for name, t in v.params.items():
                t.name = f"prefix.{i}.{name}"

    @property
    def n(self) -> int:
        return len(self.vertices)

    def parameters(self) -> list[Tensor]:
        return [t for v in self.vertices for t in v.parameters()]

    def named_parameters(self) -> dict[str, Tensor]:
        return {t.name: t for t in self.parameters()}

    def set_trainable(self, flag: bool) -> None:
        for t in self.parameters():
            t.requires_grad = flag
            t.grad = None

    def vertex_prefixes(self, i: int) -> list[PrefixPair]:
        if not 0 <= i < self.n:
            raise InputError(f"vertex index {i} out of range for n={self.n}")
        return self.vertices[i].prefixes()

    def stacked_outputs(self, slot: str, indices: Sequence[int] | None = None) -> Tensor:
        """Reparam outputs for ``slot`` of the chosen vertices as (num_layers, m, P * d)."""
        cfg = self.config
        P, Lyr, d = cfg.prefix_len, cfg.num_layers, cfg.d_model
        chosen = range(self.n) if indices is None else indices
        outs = T.stack([self.vertices[i].reparam(slot) for i in chosen])   # (m, P, Lyr*d)
        m = outs.shape[0]
        return outs.reshape(m, P, Lyr, d).transpose(2, 0, 1, 3).reshape(Lyr, m, P * d)


class HeadSimplex:
    def __init__(self, heads: list[PredictionHead]):
        if not heads:
            raise InputError("a head simplex needs at least one vertex")
        shapes = {h.weight.shape for h in heads}
        if len(shapes) != 1:
            raise ShapeError(f"head vertices disagree on shape: {sorted(shapes)}")
        self.heads = heads
        for i, h in enumerate(heads):
            h.weight.name = f"head.{i}.weight"
            h.bias.name = f"head.{i}.bias"

    @property
    def n(self) -> int:
        return len(self.heads)

    def parameters(self) -> list[Tensor]:
        return [t for h in self.heads for t in h.parameters()]

    def named_parameters(self) -> dict[str, Tensor]:
        return {t.name: t for t in self.parameters()}

    def set_trainable(self, flag: bool) -> None:
        for t in self.parameters():
            t.requires_grad = flag
            t.grad = None


def init_simplex(config: ModelConfig, n: int, seed: int,
                 head_vertices: int | None = None) -> tuple[PrefixSimplex, HeadSimplex]:
    """Independently initialized prefix and head simplexes (``head_vertices`` defaults to ``n``)."""
    n_head = n if head_vertices is None else head_vertices
    if n < 1 or n_head < 1:
        raise InputError(f"vertex counts must be >= 1 (got prefix={n}, head={n_head})")
    prefix = PrefixSimplex([init_prefix_vertex(config, seed, i) for i in range(n)], config)
    heads = HeadSimplex([init_head(config, seed, i) for i in range(n_head)])
    return prefix, heads


def _check_plan(simplex: PrefixSimplex, plan: SamplePlan) -> None:
    expected = (simplex.config.num_layers, 2, simplex.n)
    if plan.prefix.ndim != 4 or plan.prefix.shape[1:] != expected:
        raise ShapeError(f"plan prefix weights {plan.prefix.shape} do not match (B, {expected})")


def active_vertices(weights: np.ndarray) -> np.ndarray:
    """Indices of vertices with a nonzero weight anywhere in ``weights`` (last axis = vertex)."""
    return np.flatnonzero(np.any(weights.reshape(-1, weights.shape[-1]) != 0, axis=0))


def materialize_prefixes(simplex: PrefixSimplex, plan: SamplePlan) -> list[PrefixPair]:
    """Per-observation prefixes ``sum_i alpha_i MLP_i(E_i)``; each layer's pair is (B, P, d).

    Vertices whose weight is zero throughout the plan are left out of the graph.
    """
    _check_plan(simplex, plan)
    cfg = simplex.config
    B, P, d = len(plan), cfg.prefix_len, cfg.d_model
    dtype = T.get_default_dtype()
    active = active_vertices(plan.prefix)
    mixed = []
    for s, slot in enumerate(SLOTS):
        weights = plan.prefix[:, :, s, active].transpose(1, 0, 2)
        alpha = Tensor(np.ascontiguousarray(weights), dtype=dtype)
        out = T.matmul(alpha, simplex.stacked_outputs(slot, active))          # (Lyr, B, P*d)
        mixed.append(out.reshape(cfg.num_layers, B, P, d))
    return [PrefixPair(mixed[0][l], mixed[1][l]) for l in range(cfg.num_layers)]


def sample_head(simplex: HeadSimplex, plan: SamplePlan) -> PredictionHead:
    """Per-observation head: alpha-weighted average of head weights and biases."""
    if plan.head.ndim != 2 or plan.head.shape[1] != simplex.n:
        raise ShapeError(f"plan head weights {plan.head.shape} do not match n_head={simplex.n}")
    B = len(plan.head)
    d, out = simplex.heads[0].weight.shape
    active = active_vertices(plan.head)
    heads = [simplex.heads[i] for i in active]
    alpha = Tensor(np.ascontiguousarray(plan.head[:, active]), dtype=T.get_default_dtype())
    w = T.stack([h.weight for h in heads]).reshape(len(heads), d * out)
    b = T.stack([h.bias for h in heads])
    return PredictionHead(T.matmul(alpha, w).reshape(B, d, out), T.matmul(alpha, b))


@dataclass
class Baked:
    """Static prefixes (P, d) per layer and a single head; no reparameterization networks."""

    prefixes: list[PrefixPair]
    head: PredictionHead

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for l, pair in enumerate(self.prefixes):
            out[f"baked.layers.{l}.key"] = pair.key.data.copy()
            out[f"baked.layers.{l}.value"] = pair.value.data.copy()
        out["baked.head.weight"] = self.head.weight.data.copy()
        out["baked.head.bias"] = self.head.bias.data.copy()
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], num_layers: int) -> "Baked":
        dtype = T.get_default_dtype()
        prefixes = [PrefixPair(Tensor(arrays[f"baked.layers.{l}.key"], dtype=dtype),
                               Tensor(arrays[f"baked.layers.{l}.value"], dtype=dtype))
                    for l in range(num_layers)]
        head = PredictionHead(Tensor(arrays["baked.head.weight"], dtype=dtype),
                              Tensor(arrays["baked.head.bias"], dtype=dtype))
        return cls(prefixes, head)


def bake(simplex: PrefixSimplex, heads: HeadSimplex, prefix_alpha, head_alpha) -> Baked:
    """Materialize a single simplex member and detach it from the graph."""
    plan = SamplePlan.constant(1, simplex.config.num_layers, prefix_alpha, head_alpha)
    with T.no_grad():
        pairs = materialize_prefixes(simplex, plan)
        head = sample_head(heads, plan)
    prefixes = [PrefixPair(Tensor(p.key.data[0].copy(), dtype=p.key.dtype),
                           Tensor(p.value.data[0].copy(), dtype=p.value.dtype)) for p in pairs]
    return Baked(prefixes, PredictionHead(Tensor(head.weight.data[0].copy(), dtype=head.weight.dtype),
                                          Tensor(head.bias.data[0].copy(), dtype=head.bias.dtype)))


def centroid(simplex: PrefixSimplex, heads: HeadSimplex) -> Baked:
    """The simplex member with all weights equal to 1/n."""
    return bake(simplex, heads, np.full(simplex.n, 1.0 / simplex.n), np.full(heads.n, 1.0 / heads.n))


def vertex_model(simplex: PrefixSimplex, heads: HeadSimplex, i: int) -> Baked:
    """Vertex ``i`` baked directly from its own networks.

    A single-vertex side (prefix or head) is shared by every vertex index.
    """
    n = max(simplex.n, heads.n)
    if not 0 <= i < n:
        raise InputError(f"vertex index {i} out of range for n={n}")
    with T.no_grad():
        pairs = simplex.vertex_prefixes(i if simplex.n > 1 else 0)
    head = heads.heads[i if heads.n > 1 else 0]
    return Baked([PrefixPair(Tensor(p.key.data.copy(), dtype=p.key.dtype),
                             Tensor(p.value.data.copy(), dtype=p.value.dtype)) for p in pairs],
                 PredictionHead(Tensor(head.weight.data.copy(), dtype=head.weight.dtype),
                                Tensor(head.bias.data.copy(), dtype=head.bias.dtype)))


def line_point(simplex: PrefixSimplex, heads: HeadSimplex, alpha: float) -> Baked:
    """Point ``alpha * vertex0 + (1 - alpha) * vertex1`` of a 2-vertex line."""
    if simplex.n != 2:
        raise InputError(f"line_point needs a 2-vertex simplex, got n={simplex.n}")
    if not 0.0 <= alpha <= 1.0:
        raise InputError(f"alpha must lie in [0, 1], got {alpha}")
    weights = np.array([alpha, 1.0 - alpha])
    head_weights = weights if heads.n == 2 else np.ones(1)
    return bake(simplex, heads, weights, head_weights)


class SubspaceModel:
    """Frozen encoder plus prefix and head simplexes."""

    def __init__(self, encoder: Encoder, prefix: PrefixSimplex, heads: HeadSimplex):
        self.encoder = encoder
        self.prefix = prefix
        self.heads = heads

    @property
    def config(self) -> ModelConfig:
        return self.prefix.config

    def trainable_parameters(self) -> list[Tensor]:
        return [t for t in self.prefix.parameters() + self.heads.parameters() if t.requires_grad]

    def active_parameters(self, plan: SamplePlan) -> list[Tensor]:
        """Trainable parameters of the vertices that carry weight somewhere in ``plan``."""
        params = [t for i in active_vertices(plan.prefix) for t in self.prefix.vertices[i].parameters()]
        params += [t for i in active_vertices(plan.head) for t in self.heads.heads[i].parameters()]
        return [t for t in params if t.requires_grad]

    def forward(self, batch: Batch, plan: SamplePlan) -> Tensor:
        prefixes = materialize_prefixes(self.prefix, plan)
        pooled = self.encoder.encode(batch, prefixes if self.config.prefix_len > 0 else None)
        return predict(pooled, sample_head(self.heads, plan))

    def draw_plan(self, keys, seed: int) -> SamplePlan:
        return draw_plan(keys, seed, self.config.num_layers, self.prefix.n, self.heads.n)

    def uniform_plan(self, batch_size: int) -> SamplePlan:
        return SamplePlan.uniform(batch_size, self.config.num_layers, self.prefix.n, self.heads.n)

    def centroid(self) -> Baked:
        return centroid(self.prefix, self.heads)

    def state_dict(self) -> dict[str, np.ndarray]:
        named = {**self.prefix.named_parameters(), **self.heads.named_parameters()}
        return {k: v.data.copy() for k, v in named.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        named = {**self.prefix.named_parameters(), **self.heads.named_parameters()}
        for k, t in named.items():
            if k not in state:
                raise InputError(f"state dict missing {k}")
            t.data = np.array(state[k], dtype=t.data.dtype)


def forward_baked(encoder: Encoder, baked: Baked, batch: Batch) -> Tensor:
    prefixes = baked.prefixes if baked.prefixes and baked.prefixes[0].key.shape[0] > 0 else None
    return predict(encoder.encode(batch, prefixes), baked.head)
