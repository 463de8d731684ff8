"""Small post-LN transformer encoder with per-layer key/value prefixes."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, InputError, ShapeError
from .tensor import Tensor
from .tokenizer import CLS_ID, MASK_ID, PAD_ID, SEP_ID, Batch, TokenSequence, collate

log = logging.getLogger(__name__)

MASK_FILL = -1e9
LN_EPS = 1e-12


@dataclass
class ModelConfig:
    vocab_size: int
    num_layers: int = 2
    d_model: int = 64
    num_heads: int = 4
    d_ff: int = 128
    max_seq_len: int = 64
    prefix_len: int = 8
    task_head: str = "classification"
    num_classes: int = 2

    def __post_init__(self) -> None:
        if self.d_model % self.num_heads:
            raise InputError(f"d_model={self.d_model} not divisible by num_heads={self.num_heads}")
        if self.prefix_len < 0:
            raise InputError("prefix_len must be >= 0")
        if self.task_head not in ("classification", "regression"):
            raise InputError(f"unknown task_head {self.task_head!r}")
        if self.task_head == "classification" and self.num_classes < 2:
            raise InputError("classification needs at least 2 classes")

    @property
    def output_dim(self) -> int:
        return self.num_classes if self.task_head == "classification" else 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


@dataclass
class PrefixPair:
    """Key and value prefixes for one layer, shaped (P, d) or per observation (B, P, d)."""

    key: Tensor
    value: Tensor


@dataclass
class PredictionHead:
    """Affine head; ``weight`` is (d, out) or per observation (B, d, out)."""

    weight: Tensor
    bias: Tensor

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator) -> "PredictionHead":
        bound = 1.0 / np.sqrt(config.d_model)
        w = rng.uniform(-bound, bound, size=(config.d_model, config.output_dim))
        b = rng.uniform(-bound, bound, size=(config.output_dim,))
        return cls(T.parameter(w, "head.weight"), T.parameter(b, "head.bias"))

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    lead = x.shape[:-1]
    flat = x.reshape(-1, x.shape[-1]) if x.ndim != 2 else x
    out = T.matmul(flat, weight) + bias
    return out.reshape(*lead, weight.shape[-1]) if x.ndim != 2 else out


def attention_with_prefixes(hidden: Tensor, weights: dict[str, Tensor], prefixes: PrefixPair | None,
                            mask: np.ndarray, num_heads: int, return_attention: bool = False):
    """Multi-head self-attention whose keys/values are ``concat(P_k, K)`` / ``concat(P_v, V)``.

    Prefix positions are always attendable and never act as queries. Padded
    token positions (``mask`` false) are excluded from every attention row.
    """
    B, L, d = hidden.shape
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (B, L):
        raise ShapeError(f"mask shape {mask.shape} does not match hidden {hidden.shape}")
    dh = d // num_heads
    q = linear(hidden, weights["q.weight"], weights["q.bias"])
    k = linear(hidden, weights["k.weight"], weights["k.bias"])
    v = linear(hidden, weights["v.weight"], weights["v.bias"])
    key_mask = mask
    if prefixes is not None:
        pk, pv = prefixes.key, prefixes.value
        if pk.shape != pv.shape or pk.shape[-1] != d or pk.ndim not in (2, 3):
            raise ShapeError(f"prefix shapes {pk.shape}/{pv.shape} incompatible with d_model={d}")
        P = pk.shape[-2]
        if pk.ndim == 2:
            pk = T.broadcast_to(pk, (B, P, d))
            pv = T.broadcast_to(pv, (B, P, d))
        elif pk.shape[0] != B:
            raise ShapeError(f"per-observation prefixes {pk.shape} do not match batch size {B}")
        k = T.concat([pk, k], axis=1)
        v = T.concat([pv, v], axis=1)
        key_mask = np.concatenate([np.ones((B, P), dtype=bool), mask], axis=1)
    S = k.shape[1]
    qh = q.reshape(B, L, num_heads, dh).transpose(0, 2, 1, 3)
    kh = k.reshape(B, S, num_heads, dh).transpose(0, 2, 3, 1)
    vh = v.reshape(B, S, num_heads, dh).transpose(0, 2, 1, 3)
    scores = T.matmul(qh, kh) * (1.0 / np.sqrt(dh))
    scores = T.masked_fill(scores, ~key_mask[:, None, None, :], MASK_FILL)
    attn = T.softmax(scores, axis=-1)
    ctx = T.matmul(attn, vh).transpose(0, 2, 1, 3).reshape(B, L, d)
    out = linear(ctx, weights["o.weight"], weights["o.bias"])
    if return_attention:
        return out, attn
    return out


class Encoder:
    """Token + learned position embeddings followed by ``num_layers`` post-LN blocks.

    A tied masked-token decoder (``mlm.bias``) is kept for toy pretraining.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        d, f = config.d_model, config.d_ff
        p: dict[str, Tensor] = {}

        def normal(*shape):
            return rng.normal(0.0, 0.02, size=shape)

        p["embeddings.token"] = T.parameter(normal(config.vocab_size, d))
        p["embeddings.position"] = T.parameter(normal(config.max_seq_len, d))
        p["embeddings.ln.gain"] = T.parameter(np.ones(d))
        p["embeddings.ln.bias"] = T.parameter(np.zeros(d))
        for i in range(config.num_layers):
            pre = f"layers.{i}."
            for proj in ("q", "k", "v", "o"):
                p[pre + f"attn.{proj}.weight"] = T.parameter(normal(d, d))
                p[pre + f"attn.{proj}.bias"] = T.parameter(np.zeros(d))
            p[pre + "attn_ln.gain"] = T.parameter(np.ones(d))
            p[pre + "attn_ln.bias"] = T.parameter(np.zeros(d))
            p[pre + "ff.in.weight"] = T.parameter(normal(d, f))
            p[pre + "ff.in.bias"] = T.parameter(np.zeros(f))
            p[pre + "ff.out.weight"] = T.parameter(normal(f, d))
            p[pre + "ff.out.bias"] = T.parameter(np.zeros(d))
            p[pre + "ff_ln.gain"] = T.parameter(np.ones(d))
            p[pre + "ff_ln.bias"] = T.parameter(np.zeros(d))
        p["mlm.bias"] = T.parameter(np.zeros(config.vocab_size))
        for name, t in p.items():
            t.name = name
        self.params = p

    # -- parameter bookkeeping ------------------------------------------
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise InputError(f"state dict missing {sorted(missing)}")
        for k, t in self.params.items():
            if state[k].shape != t.shape:
                raise ShapeError(f"{k}: expected {t.shape}, got {state[k].shape}")
            t.data = np.array(state[k], dtype=T.get_default_dtype())

    def is_frozen(self) -> bool:
        return not any(t.requires_grad for t in self.params.values())

    def layer_weights(self, i: int) -> dict[str, Tensor]:
        pre = f"layers.{i}.attn."
        return {k[len(pre):]: v for k, v in self.params.items() if k.startswith(pre)}

    # -- forward ----------------------------------------------------------
    def hidden_states(self, batch: Batch, prefixes: Sequence[PrefixPair] | None = None) -> Tensor:
        cfg, p = self.config, self.params
        B, L = batch.ids.shape
        if L > cfg.max_seq_len:
            raise InputError(f"sequence length {L} exceeds max_seq_len={cfg.max_seq_len}")
        if prefixes is not None and len(prefixes) != cfg.num_layers:
            raise ShapeError(f"expected {cfg.num_layers} prefix pairs, got {len(prefixes)}")
        x = T.embedding(p["embeddings.token"], batch.ids) + p["embeddings.position"][:L]
        x = T.layer_norm(x, p["embeddings.ln.gain"], p["embeddings.ln.bias"], LN_EPS)
        for i in range(cfg.num_layers):
            pre = f"layers.{i}."
            a = attention_with_prefixes(x, self.layer_weights(i), None if prefixes is None else prefixes[i],
                                        batch.mask, cfg.num_heads)
            x = T.layer_norm(x + a, p[pre + "attn_ln.gain"], p[pre + "attn_ln.bias"], LN_EPS)
            h = T.gelu(linear(x, p[pre + "ff.in.weight"], p[pre + "ff.in.bias"]))
            h = linear(h, p[pre + "ff.out.weight"], p[pre + "ff.out.bias"])
            x = T.layer_norm(x + h, p[pre + "ff_ln.gain"], p[pre + "ff_ln.bias"], LN_EPS)
        return x

    def encode(self, batch: Batch, prefixes: Sequence[PrefixPair] | None = None) -> Tensor:
        """Pooled representation: the hidden state at the first ([CLS]) position."""
        return self.hidden_states(batch, prefixes)[:, 0, :]

    def mlm_logits(self, hidden_rows: Tensor) -> Tensor:
        return T.matmul(hidden_rows, self.params["embeddings.token"].transpose()) + self.params["mlm.bias"]


def predict(pooled: Tensor, head: PredictionHead) -> Tensor:
    """Affine map of pooled rows; supports a shared or per-observation head."""
    w, b = head.weight, head.bias
    if w.ndim == 2:
        if pooled.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
            raise ShapeError(f"head {w.shape}/{b.shape} incompatible with pooled {pooled.shape}")
        return T.matmul(pooled, w) + b
    B, d = pooled.shape
    if w.shape[:2] != (B, d) or b.shape != (B, w.shape[2]):
        raise ShapeError(f"per-observation head {w.shape}/{b.shape} incompatible with pooled {pooled.shape}")
    return T.matmul(pooled.reshape(B, 1, d), w).reshape(B, w.shape[2]) + b


def freeze_base(encoder: Encoder) -> None:
    for t in encoder.parameters():
        t.requires_grad = False
        t.grad = None


def mask_tokens(ids: np.ndarray, mask: np.ndarray, rng: np.random.Generator,
                prob: float = 0.15) -> tuple[np.ndarray, np.ndarray]:
    """Replace ~``prob`` of real non-special tokens by [MASK]; at least one per row when possible.

    Returns ``(masked_ids, target_positions)`` with positions as a boolean array.
    """
    eligible = mask & (ids != CLS_ID) & (ids != SEP_ID) & (ids != PAD_ID)
    chosen = eligible & (rng.random(ids.shape) < prob)
    for r in np.flatnonzero(~chosen.any(axis=1) & eligible.any(axis=1)):
        chosen[r, rng.choice(np.flatnonzero(eligible[r]))] = True
    masked = ids.copy()
    masked[chosen] = MASK_ID
    return masked, chosen


def masked_lm_loss(encoder: Encoder, batch: Batch, rng: np.random.Generator) -> Tensor:
    masked_ids, targets = mask_tokens(batch.ids, batch.mask, rng)
    hidden = encoder.hidden_states(Batch(ids=masked_ids, mask=batch.mask))
    B, L, d = hidden.shape
    flat = np.flatnonzero(targets.reshape(-1))
    rows = hidden.reshape(B * L, d)[flat]
    return T.cross_entropy(encoder.mlm_logits(rows), batch.ids.reshape(-1)[flat])


def pretrain_toy(encoder: Encoder, corpus: Sequence[TokenSequence], steps: int, seed: int,
                 batch_size: int = 32, lr: float = 1e-3) -> list[float]:
    """Masked-token pretraining of the base encoder; returns the per-step losses."""
    from .optim import AdamW

    if not corpus:
        raise InputError("pretraining corpus is empty")
    flags = [t.requires_grad for t in encoder.parameters()]
    for t in encoder.parameters():
        t.requires_grad = True
    rng = np.random.default_rng(seed)
    losses: list[float] = []
    try:
        if steps > 0:
            opt = AdamW(encoder.parameters(), lr=lr)
        for step in range(steps):
            picks = rng.choice(len(corpus), size=min(batch_size, len(corpus)), replace=False)
            batch = collate([corpus[i] for i in picks])
            loss = masked_lm_loss(encoder, batch, rng)
            T.backward(loss)
            opt.step()
            losses.append(loss.item())
            if step % 250 == 0:
                log.info("pretrain step %d loss %.4f", step, losses[-1])
    finally:
        for t, flag in zip(encoder.parameters(), flags):
            t.requires_grad = flag
            t.grad = None
    return losses


def require_frozen(encoder: Encoder) -> None:
    if not encoder.is_frozen():
        raise ContractError("base encoder must be frozen (call freeze_base) before prefix training")
