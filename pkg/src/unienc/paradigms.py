"""Bi-, Poly-, Cross- and Uni-Encoder scoring on one shared encoder."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import Encoder, aggregate, mean_pool
from .inputs import (Dialogue, EncodedBatch, Vocab, assemble_batch, assemble_contexts,
                     assemble_ids, candidate_width, tokenize)
from .masks import Kind, build_mask, mask_for_batch
from .tensor import ContractError, ShapeError, Tensor


class Paradigm(str, enum.Enum):
    BI = "bi"
    POLY = "poly"
    CROSS = "cross"
    UNI = "uni"

    @classmethod
    def parse(cls, name) -> "Paradigm":
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).strip().lower().replace("-encoder", ""))
        except ValueError:
            raise ContractError(f"unknown paradigm {name!r}; expected bi, poly, cross or uni") from None

    @property
    def mask_kind(self) -> Kind:
        return {"bi": Kind.DIAGONAL, "poly": Kind.LIGHT_ARROW,
                "cross": Kind.CROSS, "uni": Kind.ARROW}[self.value]


@dataclass
class ScoreVector:
    scores: np.ndarray
    probs: np.ndarray

    @classmethod
    def from_scores(cls, scores) -> "ScoreVector":
        s = np.asarray(scores, dtype=np.float64)
        z = np.exp(s - s.max(axis=-1, keepdims=True))
        return cls(s, z / z.sum(axis=-1, keepdims=True))

    @property
    def best(self):
        return np.argmax(self.scores, axis=-1)


def score_bi(context_repr: Tensor, candidate_reprs: Tensor) -> Tensor:
    """Dot products f(C) . f(r_i): (B, d) x (B, M, d) -> (B, M)."""
    context_repr, candidate_reprs = T.as_tensor(context_repr), T.as_tensor(candidate_reprs)
    if context_repr.ndim == 1:
        context_repr = context_repr.reshape(1, -1)
    if candidate_reprs.ndim == 2:
        candidate_reprs = candidate_reprs.reshape(1, *candidate_reprs.shape)
    b, m, d = candidate_reprs.shape
    if context_repr.shape != (b, d):
        raise ShapeError(f"score_bi: context {context_repr.shape} vs candidates {candidate_reprs.shape}")
    return (candidate_reprs @ context_repr.reshape(b, d, 1)).reshape(b, m)


def score_poly(context_states: Tensor, candidate_reprs: Tensor, codes: Tensor,
               context_pad=None) -> Tensor:
    """Light attention over the context.

    Codes attend over context token states to give m global features; every
    candidate vector attends over those features and is scored by its dot
    product with the result.
    """
    context_states, candidate_reprs, codes = (T.as_tensor(context_states), T.as_tensor(candidate_reprs),
                                              T.as_tensor(codes))
    if codes.ndim != 2 or codes.shape[0] < 1:
        raise ContractError(f"poly scoring needs m >= 1 codes, got shape {codes.shape}")
    b, lc, d = context_states.shape
    m = candidate_reprs.shape[1]
    if codes.shape[1] != d or candidate_reprs.shape != (b, m, d):
        raise ShapeError(f"score_poly: context {context_states.shape}, candidates "
                         f"{candidate_reprs.shape}, codes {codes.shape}")
    allowed = np.ones((b, 1, lc), dtype=bool) if context_pad is None else ~np.asarray(context_pad)[:, None, :]
    keys = context_states.transpose(0, 2, 1)
    feats = T.masked_softmax(codes @ keys, allowed) @ context_states
    att = T.masked_softmax(candidate_reprs @ feats.transpose(0, 2, 1), np.ones((1, 1, 1), dtype=bool))
    ctx = att @ feats
    return (ctx * candidate_reprs).sum(axis=-1)


def rank(scores) -> list[int]:
    """Candidate indices best-first; ties keep the lower index first."""
    s = np.asarray(scores, dtype=np.float64)
    bad = np.flatnonzero(~np.isfinite(s))
    if bad.size:
        raise ValueError(f"non-finite score {s[bad[0]]} for candidate {int(bad[0])}")
    return [int(i) for i in np.argsort(-s, kind="stable")]


@dataclass
class ForwardResult:
    logits: Tensor
    mlm_loss: Tensor | None = None
    passes: int = 0


class RankingModel:
    """A paradigm bound to a shared encoder plus its own scoring parameters.

    Uni and Cross share one linear head on aggregated candidate vectors; Bi and
    Poly score with raw dot products, Poly adding learned context codes.
    """

    def __init__(self, encoder: Encoder, paradigm, vocab: Vocab, scheme: str = "repeated",
                 context_sees_candidates: bool = True, poly_codes: int = 4,
                 rng: np.random.Generator | None = None, head: dict | None = None):
        self.encoder = encoder
        self.paradigm = Paradigm.parse(paradigm)
        self.vocab = vocab
        self.scheme = scheme
        self.context_sees_candidates = context_sees_candidates
        rng = rng or np.random.default_rng(1)
        d = encoder.cfg.model_dim
        std = encoder.cfg.init_std
        self.own: dict[str, Tensor] = head if head is not None else {
            "score.w": Tensor(rng.normal(0.0, std, size=(d, 1)), requires_grad=True, name="score.w"),
            "score.b": Tensor(np.zeros(1), requires_grad=True, name="score.b"),
        }
        if self.paradigm is Paradigm.POLY:
            if poly_codes < 1:
                raise ContractError(f"poly needs at least one context code, got {poly_codes}")
            self.own["poly.codes"] = Tensor(rng.normal(0.0, std, size=(poly_codes, d)),
                                            requires_grad=True, name="poly.codes")
        self.poly_codes = poly_codes if self.paradigm is Paradigm.POLY else None

    @property
    def params(self) -> dict[str, Tensor]:
        out = {f"encoder.{k}": v for k, v in self.encoder.params.items()}
        out.update({f"head.{k}": v for k, v in self.own.items()})
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, arrays) -> None:
        for k, v in self.params.items():
            if k not in arrays:
                raise ContractError(f"checkpoint lacks {k}")
            if arrays[k].shape != v.shape:
                raise ContractError(f"{k}: checkpoint shape {arrays[k].shape} != {v.shape}")
            v.data = np.array(arrays[k], dtype=np.float64)

    @property
    def max_len(self) -> int:
        return self.encoder.cfg.max_len

    def _head(self, vectors: Tensor) -> Tensor:
        b, m, _ = vectors.shape
        return (vectors @ self.own["score.w"] + self.own["score.b"]).reshape(b, m)

    def _run(self, batch: EncodedBatch, schedule, training, rng, corrupt, mlm_terms):
        token_ids = batch.token_ids
        if corrupt is not None:
            token_ids, rows, cols, targets = corrupt(batch.token_ids, batch.pad_mask)
        states = self.encoder.encode(token_ids, batch.position_ids, batch.segment_ids,
                                     schedule, training, rng)
        if corrupt is not None and len(targets):
            logits = self.encoder.mlm_logits_at(states, rows, cols)
            mlm_terms.append((T.cross_entropy(logits, targets), len(targets)))
        return states

    def forward(self, dialogues, training: bool = False, rng=None, corrupt=None) -> ForwardResult:
        """Candidate logits (B, M) for a list of dialogues with equal M.

        ``corrupt(token_ids, pad_mask) -> (ids, rows, cols, targets)`` turns on
        the masked-token loss for every encoder pass.
        """
        dialogues = list(dialogues)
        start = self.encoder.passes
        mlm_terms: list = []
        p = self.paradigm
        layers = self.encoder.cfg.layers
        width = candidate_width(dialogues, self.vocab)
        cfg = self.encoder.cfg
        if p is Paradigm.UNI:
            batch = assemble_batch(dialogues, self.vocab, self.scheme, self.max_len, width)
            sched = mask_for_batch(Kind.ARROW, batch, layers, self.context_sees_candidates)
            states = self._run(batch, sched, training, rng, corrupt, mlm_terms)
            logits = self._head(aggregate(states, batch, cfg.aggregation, cfg.include_special))
        elif p is Paradigm.CROSS:
            m = len(dialogues[0].candidates)
            columns = []
            for i in range(m):
                single = [Dialogue(d.context, [d.candidates[i]]) for d in dialogues]
                batch = assemble_batch(single, self.vocab, self.scheme, self.max_len, width)
                sched = mask_for_batch(Kind.CROSS, batch, layers)
                states = self._run(batch, sched, training, rng, corrupt, mlm_terms)
                columns.append(self._head(aggregate(states, batch, cfg.aggregation, cfg.include_special)))
            logits = T.stack(columns, axis=1).reshape(len(dialogues), m)
        else:
            ctx_repr, ctx_states, ctx_pad = self._encode_contexts(dialogues, training, rng, corrupt, mlm_terms)
            cand = self._encode_candidates(dialogues, width, training, rng, corrupt, mlm_terms)
            if p is Paradigm.BI:
                logits = score_bi(ctx_repr, cand)
            else:
                logits = score_poly(ctx_states, cand, self.own["poly.codes"], ctx_pad)
        mlm = None
        if mlm_terms:
            total = sum(n for _, n in mlm_terms)
            mlm = mlm_terms[0][0] * (mlm_terms[0][1] / total)
            for loss, n in mlm_terms[1:]:
                mlm = mlm + loss * (n / total)
        return ForwardResult(logits, mlm, self.encoder.passes - start)

    def _encode_contexts(self, dialogues, training, rng, corrupt, mlm_terms):
        ids, pad = assemble_contexts(dialogues, self.vocab, self.max_len)
        b, t = ids.shape
        lens = (~pad).sum(axis=1).tolist()
        ctx_batch = EncodedBatch(ids, np.tile(np.arange(t), (b, 1)), np.zeros_like(ids), pad,
                                 [[] for _ in range(b)], lens, self.scheme)
        sched = build_mask(Kind.SQUARE, lens, ctx_batch.candidate_spans, t, pad, self.encoder.cfg.layers)
        states = self._run(ctx_batch, sched, training, rng, corrupt, mlm_terms)
        return mean_pool(states, pad), states, pad

    def _encode_candidates(self, dialogues, width, training, rng, corrupt, mlm_terms):
        cands = [[tokenize(c, self.vocab) for c in d.candidates] for d in dialogues]
        batch = assemble_ids([[] for _ in dialogues], cands, width, self.scheme)
        sched = mask_for_batch(Kind.DIAGONAL, batch, self.encoder.cfg.layers)
        states = self._run(batch, sched, training, rng, corrupt, mlm_terms)
        return aggregate(states, batch, self.encoder.cfg.aggregation, self.encoder.cfg.include_special)

    def score(self, dialogues) -> np.ndarray:
        """Raw candidate scores (B, M) without recording a graph."""
        with T.no_grad():
            return self.forward(dialogues).logits.data.copy()

    def score_one(self, dialogue: Dialogue) -> ScoreVector:
        return ScoreVector.from_scores(self.score([dialogue])[0])


def score_uni(model: RankingModel, dialogues) -> np.ndarray:
    if model.paradigm is not Paradigm.UNI:
        raise ContractError(f"score_uni needs a uni model, got {model.paradigm.value}")
    return model.score(dialogues)


def score_cross(model: RankingModel, dialogues) -> np.ndarray:
    if model.paradigm is not Paradigm.CROSS:
        raise ContractError(f"score_cross needs a cross model, got {model.paradigm.value}")
    return model.score(dialogues)


def share(model: RankingModel, paradigm, **kwargs) -> RankingModel:
    """A model of another paradigm over the same encoder and head tensors."""
    head = {k: v for k, v in model.own.items() if k.startswith("score.")}
    return RankingModel(model.encoder, paradigm, model.vocab, head=dict(head), **kwargs)
