"""Post-LN transformer encoder with an injectable attention schedule."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .inputs import CLS, RESERVED, SEP, EncodedBatch
from .masks import MaskSchedule
from .tensor import ContractError, Tensor

AGGREGATIONS = ("avg_tokens", "cls")


@dataclass
class EncoderConfig:
    layers: int = 2
    heads: int = 4
    model_dim: int = 64
    ff_dim: int = 256
    max_len: int = 512
    vocab_size: int = 256
    dropout: float = 0.1
    aggregation: str = "avg_tokens"
    include_special: bool = True
    init_std: float = 0.02
    ln_eps: float = 1e-12

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ContractError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if self.aggregation not in AGGREGATIONS:
            raise ContractError(f"aggregation must be one of {AGGREGATIONS}, got {self.aggregation!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError(f"dropout must lie in [0, 1), got {self.dropout}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class EncoderOutput:
    token_states: Tensor
    candidate_vectors: Tensor | None = None
    mlm_logits: Tensor | None = None


def init_params(cfg: EncoderConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    d, f = cfg.model_dim, cfg.ff_dim

    def w(*shape):
        return rng.normal(0.0, cfg.init_std, size=shape)

    raw = {
        "embed.token": w(cfg.vocab_size, d),
        "embed.position": w(cfg.max_len, d),
        "embed.segment": w(2, d),
        "embed.ln.gamma": np.ones(d),
        "embed.ln.beta": np.zeros(d),
    }
    for i in range(cfg.layers):
        p = f"layer{i}."
        raw.update({
            p + "attn.qkv.w": w(d, 3 * d), p + "attn.qkv.b": np.zeros(3 * d),
            p + "attn.out.w": w(d, d), p + "attn.out.b": np.zeros(d),
            p + "ln1.gamma": np.ones(d), p + "ln1.beta": np.zeros(d),
            p + "ff.in.w": w(d, f), p + "ff.in.b": np.zeros(f),
            p + "ff.out.w": w(f, d), p + "ff.out.b": np.zeros(d),
            p + "ln2.gamma": np.ones(d), p + "ln2.beta": np.zeros(d),
        })
    raw["mlm.w"] = w(d, cfg.vocab_size)
    raw["mlm.b"] = np.zeros(cfg.vocab_size)
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in raw.items()}


def pooling_weights(batch: EncodedBatch, mode: str = "avg_tokens",
                    include_special: bool = True) -> np.ndarray:
    """(B, M, T) weights whose product with token states gives candidate vectors."""
    b, t = batch.token_ids.shape
    m = batch.num_candidates
    out = np.zeros((b, m, t))
    special = {RESERVED.index(CLS), RESERVED.index(SEP)}
    for r in range(b):
        for j, (s, e) in enumerate(batch.candidate_spans[r]):
            if mode == "cls":
                if batch.pad_mask[r, s] or batch.token_ids[r, s] != RESERVED.index(CLS):
                    raise ContractError(f"row {r} span {j}: no [CLS] at span start")
                out[r, j, s] = 1.0
                continue
            keep = ~batch.pad_mask[r, s:e]
            if not include_special:
                keep &= ~np.isin(batch.token_ids[r, s:e], list(special))
            n = int(keep.sum())
            if n == 0:
                raise ContractError(f"row {r} span {j} has no tokens to aggregate")
            out[r, j, s:e] = keep / n
    return out


def aggregate(token_states: Tensor, batch: EncodedBatch, mode: str = "avg_tokens",
              include_special: bool = True) -> Tensor:
    return T.matmul(pooling_weights(batch, mode, include_special), token_states)


def mean_pool(token_states: Tensor, pad_mask: np.ndarray) -> Tensor:
    """Average over non-pad positions: (B, T, d) -> (B, d)."""
    keep = (~np.asarray(pad_mask)).astype(np.float64)
    w = keep / keep.sum(axis=1, keepdims=True)
    return T.matmul(w[:, None, :], token_states).reshape(token_states.shape[0], -1)


class Encoder:
    """Shared encoder ``f``; ``passes`` counts forward invocations."""

    def __init__(self, cfg: EncoderConfig, params: dict[str, Tensor] | None = None,
                 rng: np.random.Generator | None = None):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, rng or np.random.default_rng(0))
        self.passes = 0

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, arrays) -> None:
        for k, v in self.params.items():
            if arrays[k].shape != v.shape:
                raise ContractError(f"{k}: checkpoint shape {arrays[k].shape} != {v.shape}")
            v.data = np.array(arrays[k], dtype=np.float64)

    def embed(self, token_ids, position_ids, segment_ids, training=False, rng=None) -> Tensor:
        p, cfg = self.params, self.cfg
        if position_ids.max(initial=0) >= cfg.max_len:
            raise ContractError(f"position id {position_ids.max()} exceeds max_len {cfg.max_len}")
        x = (T.take_rows(p["embed.token"], token_ids)
             + T.take_rows(p["embed.position"], position_ids)
             + T.take_rows(p["embed.segment"], segment_ids))
        x = T.layer_norm(x, p["embed.ln.gamma"], p["embed.ln.beta"], cfg.ln_eps)
        return T.dropout(x, cfg.dropout, rng, training)

    def layer(self, i: int, x: Tensor, mask: np.ndarray, training=False, rng=None) -> Tensor:
        p, cfg = self.params, self.cfg
        pre = f"layer{i}."
        b, t, d = x.shape
        h = cfg.heads
        dh = d // h
        qkv = x @ p[pre + "attn.qkv.w"] + p[pre + "attn.qkv.b"]
        qkv = qkv.reshape(b, t, 3, h, dh).transpose(2, 0, 3, 1, 4)
        q = _pick(qkv, 0)
        k = _pick(qkv, 1)
        v = _pick(qkv, 2)
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
        probs = T.masked_softmax(scores, mask[:, None, :, :])
        ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
        attn = ctx @ p[pre + "attn.out.w"] + p[pre + "attn.out.b"]
        x = T.layer_norm(x + T.dropout(attn, cfg.dropout, rng, training),
                         p[pre + "ln1.gamma"], p[pre + "ln1.beta"], cfg.ln_eps)
        ff = T.gelu(x @ p[pre + "ff.in.w"] + p[pre + "ff.in.b"]) @ p[pre + "ff.out.w"] + p[pre + "ff.out.b"]
        return T.layer_norm(x + T.dropout(ff, cfg.dropout, rng, training),
                            p[pre + "ln2.gamma"], p[pre + "ln2.beta"], cfg.ln_eps)

    def encode(self, token_ids, position_ids, segment_ids, schedule: MaskSchedule,
               training=False, rng=None) -> Tensor:
        """Token states (B, T, d) for raw id matrices."""
        b, t = token_ids.shape
        if schedule.n_layers != self.cfg.layers:
            raise ContractError(f"schedule has {schedule.n_layers} layers, encoder has {self.cfg.layers}")
        if schedule.seq_len != t or schedule.layer(0).shape[0] not in (1, b):
            raise ContractError(f"schedule geometry {schedule.layer(0).shape} does not match batch {(b, t)}")
        self.passes += 1
        x = self.embed(token_ids, position_ids, segment_ids, training, rng)
        for i in range(self.cfg.layers):
            x = self.layer(i, x, schedule.layer(i), training, rng)
        return x

    def forward(self, batch: EncodedBatch, schedule: MaskSchedule, training=False, rng=None,
                with_mlm=False) -> EncoderOutput:
        states = self.encode(batch.token_ids, batch.position_ids, batch.segment_ids,
                             schedule, training, rng)
        vectors = aggregate(states, batch, self.cfg.aggregation, self.cfg.include_special)
        logits = self.mlm_logits(states) if with_mlm else None
        return EncoderOutput(states, vectors, logits)

    __call__ = forward

    def mlm_logits(self, token_states: Tensor) -> Tensor:
        return token_states @ self.params["mlm.w"] + self.params["mlm.b"]

    def mlm_logits_at(self, token_states: Tensor, rows, cols) -> Tensor:
        """Logits only at the (row, col) positions listed: (n, vocab)."""
        b, t, d = token_states.shape
        flat = np.asarray(rows, dtype=np.int64) * t + np.asarray(cols, dtype=np.int64)
        picked = T.take_rows(token_states.reshape(b * t, d), flat)
        return self.mlm_logits(picked)


def _pick(x: Tensor, i: int) -> Tensor:
    """x[i] along the leading axis, differentiable."""
    n = x.shape[0]
    rest = x.shape[1:]
    flat = x.reshape(n, -1)
    return T.take_rows(flat, [i]).reshape(rest)
