"""Attention regimes over the concatenated context + candidates sequence.

``True`` means attention is allowed. Every position may attend to itself, so
no row is ever empty, including padding rows.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .tensor import ContractError


class Kind(str, enum.Enum):
    DIAGONAL = "diagonal"
    LIGHT_ARROW = "light-arrow"
    ARROW = "arrow"
    SQUARE = "square"
    # Square attention with exactly one candidate per pass.
    CROSS = "cross"

    @classmethod
    def parse(cls, name) -> "Kind":
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower().replace("_", "-")
        aliases = {"lightarrow": "light-arrow", "light": "light-arrow", "poly": "light-arrow",
                   "bi": "diagonal", "uni": "arrow"}
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise ContractError(f"unknown attention kind {name!r}") from None


_RULE = {Kind.DIAGONAL: 0, Kind.LIGHT_ARROW: 0, Kind.ARROW: 1, Kind.SQUARE: 2, Kind.CROSS: 2}


@dataclass(frozen=True)
class MaskSchedule:
    """Per-layer boolean maps of shape (B, T, T).

    ``light_codes`` is set only for the light-arrow regime, where context and
    candidates meet after the last layer through learned codes.
    """
    kind: Kind
    layers: tuple
    light_codes: int | None = None

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def layer(self, i: int) -> np.ndarray:
        return self.layers[i]

    @property
    def seq_len(self) -> int:
        return self.layers[0].shape[-1]


def owner_codes(seq_len: int, context_len: int, spans, pad=None) -> np.ndarray:
    owner = np.full(seq_len, -2, dtype=np.int64)
    owner[:context_len] = -1
    last = context_len
    for s, e in sorted(spans):
        if s < last or e <= s or e > seq_len:
            raise ContractError(f"candidate span {(s, e)} overlaps the context or a previous span, "
                                f"or exceeds length {seq_len}")
        last = e
    for i, (s, e) in enumerate(spans):
        owner[s:e] = i
    if pad is not None:
        owner[np.asarray(pad, dtype=bool)] = -2
    return owner


def build_map(kind, context_len: int, spans, seq_len: int | None = None, pad=None,
              context_sees_candidates: bool = True) -> np.ndarray:
    """Single T x T map for one row."""
    kind = Kind.parse(kind)
    spans = [tuple(s) for s in spans]
    if kind is Kind.CROSS and len(spans) != 1:
        raise ContractError(f"cross attention takes one candidate per pass, got {len(spans)}")
    if seq_len is None:
        seq_len = max([context_len] + [e for _, e in spans])
    owner = owner_codes(seq_len, context_len, spans, pad)
    return K.region_mask(owner, _RULE[kind], context_sees_candidates)


def build_mask(kind, context_len, candidate_spans, seq_len: int | None = None, pad_mask=None,
               n_layers: int = 1, context_sees_candidates: bool = True,
               light_codes: int = 4) -> MaskSchedule:
    """Mask schedule for a batch.

    ``context_len`` and ``candidate_spans`` may describe one row (int, list of
    pairs) or a batch (list of ints, list of span lists).
    """
    kind = Kind.parse(kind)
    if np.isscalar(context_len):
        context_len = [int(context_len)]
        candidate_spans = [candidate_spans]
        if pad_mask is not None:
            pad_mask = np.asarray(pad_mask)[None]
    if seq_len is None:
        seq_len = max(max([lc] + [e for _, e in sp]) for lc, sp in zip(context_len, candidate_spans))
    maps = np.stack([
        build_map(kind, lc, sp, seq_len, None if pad_mask is None else pad_mask[b],
                  context_sees_candidates)
        for b, (lc, sp) in enumerate(zip(context_len, candidate_spans))
    ])
    codes = None
    if kind is Kind.LIGHT_ARROW:
        if light_codes < 1:
            raise ContractError(f"light-arrow needs at least one context code, got {light_codes}")
        codes = light_codes
    return MaskSchedule(kind, (maps,) * n_layers, codes)


def mask_for_batch(kind, batch, n_layers: int = 1, context_sees_candidates: bool = True,
                   light_codes: int = 4) -> MaskSchedule:
    return build_mask(kind, batch.context_len, batch.candidate_spans, batch.token_ids.shape[1],
                      batch.pad_mask, n_layers, context_sees_candidates, light_codes)


def count_allowed(mask) -> int:
    return K.count_true(np.asarray(mask, dtype=bool))


def allowed_pairs(kind, context_len: int, cand_len: int, num_candidates: int,
                  context_sees_candidates: bool = True) -> int:
    """Closed-form count of allowed (query, key) pairs with uniform candidate width.

    For ``Kind.CROSS`` this sums over the M separate single-candidate passes.
    """
    kind = Kind.parse(kind)
    lc, lr, m = int(context_len), int(cand_len), int(num_candidates)
    if min(lc, lr, m) < 1:
        raise ContractError("allowed_pairs needs L_c, L_r, M >= 1")
    if kind in (Kind.DIAGONAL, Kind.LIGHT_ARROW):
        return lc * lc + m * lr * lr
    if kind is Kind.ARROW:
        ctx_rows = lc * (lc + m * lr) if context_sees_candidates else lc * lc
        return ctx_rows + m * lr * (lc + lr)
    if kind is Kind.SQUARE:
        return (lc + m * lr) ** 2
    return m * (lc + lr) ** 2


def enumerate_pairs(kind, context_len: int, cand_len: int, num_candidates: int,
                    context_sees_candidates: bool = True) -> int:
    """Pair count by building the maps and counting, for cross-checking the closed form."""
    kind = Kind.parse(kind)
    lc, lr, m = context_len, cand_len, num_candidates
    if kind is Kind.CROSS:
        one = build_map(Kind.CROSS, lc, [(lc, lc + lr)], context_sees_candidates=context_sees_candidates)
        return m * count_allowed(one)
    spans = [(lc + i * lr, lc + (i + 1) * lr) for i in range(m)]
    return count_allowed(build_map(kind, lc, spans, context_sees_candidates=context_sees_candidates))


def render_ascii(mask, on: str = "#", off: str = ".") -> str:
    mask = np.asarray(mask, dtype=bool)
    return "\n".join("".join(on if v else off for v in row) for row in mask)


def render_pgm(mask, scale: int = 1) -> str:
    """Plain (P2) portable graymap; allowed cells are black."""
    mask = np.asarray(mask, dtype=bool)
    if scale > 1:
        mask = np.kron(mask, np.ones((scale, scale), dtype=bool))
    h, w = mask.shape
    rows = [" ".join("0" if v else "255" for v in row) for row in mask]
    return f"P2\n{w} {h}\n255\n" + "\n".join(rows) + "\n"
