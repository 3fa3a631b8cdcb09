"""Vocabulary, tokenization and assembly of context + candidates into one row.

Row layout::

    [SPKa] u_1 ... [SPKb] u_N  [CLS] r_1 [SEP] <pad>  [CLS] r_2 [SEP] <pad> ...

Every candidate occupies a span of the same width. Under the ``repeated``
scheme each span is numbered ``L_c, L_c+1, ...`` afresh; under ``sequential``
the numbering keeps counting across spans.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractError

PAD, UNK, CLS, SEP, MASK, SPK1, SPK2 = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[SPK1]", "[SPK2]"
RESERVED = (PAD, UNK, CLS, SEP, MASK, SPK1, SPK2)

SCHEMES = ("repeated", "sequential")


class Vocab:
    """Token <-> id map; the reserved tokens always hold ids 0..6."""

    def __init__(self, tokens=()):
        self.itos = list(RESERVED)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def __getitem__(self, token) -> int:
        return self.stoi.get(token, self.stoi[UNK])

    @property
    def pad_id(self):
        return 0

    @property
    def special_ids(self):
        return tuple(range(len(RESERVED)))

    @classmethod
    def build(cls, texts, min_count: int = 1) -> "Vocab":
        counts: dict[str, int] = {}
        for text in texts:
            for tok in split_words(text):
                counts[tok] = counts.get(tok, 0) + 1
        return cls(sorted(t for t, c in counts.items() if c >= min_count and t not in RESERVED))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.itos) + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh if line.strip()]
        if tuple(tokens[:len(RESERVED)]) != RESERVED:
            raise ContractError(f"{path}: reserved tokens missing or out of order")
        return cls(tokens[len(RESERVED):])


def split_words(text: str) -> list[str]:
    return text.lower().split()


def tokenize(text: str, vocab: Vocab) -> list[int]:
    return [vocab[w] for w in split_words(text)]


def detokenize(ids, vocab: Vocab) -> str:
    return " ".join(vocab.itos[i] for i in ids)


@dataclass
class Utterance:
    text: str
    speaker: int | None = None


@dataclass
class Dialogue:
    context: list[Utterance]
    candidates: list[str]
    positive_index: int | None = None

    def __post_init__(self):
        self.context = [u if isinstance(u, Utterance) else Utterance(*u) if isinstance(u, tuple)
                        else Utterance(u) for u in self.context]
        if not self.context:
            raise ContractError("dialogue needs at least one context utterance")
        if not self.candidates:
            raise ContractError("dialogue needs at least one candidate (M = 0)")
        if self.positive_index is not None and not 0 <= self.positive_index < len(self.candidates):
            raise ContractError(f"positive_index {self.positive_index} outside [0, {len(self.candidates)})")


@dataclass
class EncodedBatch:
    """B rows of length T.

    ``pad_mask`` is True on padding. ``candidate_spans[b]`` lists M half-open
    ``(start, end)`` pairs, each covering a full span including [CLS]/[SEP]
    and any in-span padding.
    """
    token_ids: np.ndarray
    position_ids: np.ndarray
    segment_ids: np.ndarray
    pad_mask: np.ndarray
    candidate_spans: list[list[tuple[int, int]]]
    context_len: list[int]
    scheme: str = "repeated"
    truncated_candidates: int = 0
    dropped_context_tokens: int = 0

    @property
    def shape(self):
        return self.token_ids.shape

    @property
    def num_candidates(self) -> int:
        return len(self.candidate_spans[0]) if self.candidate_spans else 0

    def owner(self, b: int) -> np.ndarray:
        """Per-position owner code: -1 context, i candidate i, -2 padding."""
        t = self.token_ids.shape[1]
        out = np.full(t, -2, dtype=np.int64)
        out[:self.context_len[b]] = -1
        for i, (s, e) in enumerate(self.candidate_spans[b]):
            out[s:e] = i
        out[self.pad_mask[b]] = -2
        return out

    def select(self, rows) -> "EncodedBatch":
        rows = list(rows)
        return EncodedBatch(self.token_ids[rows], self.position_ids[rows], self.segment_ids[rows],
                            self.pad_mask[rows], [self.candidate_spans[r] for r in rows],
                            [self.context_len[r] for r in rows], self.scheme)


def _speaker_ids(context: list[Utterance], vocab: Vocab) -> list[list[int]]:
    out = []
    n = len(context)
    for k, u in enumerate(context):
        # parity counted from the last turn so the final speaker is stable under truncation
        spk = u.speaker if u.speaker in (1, 2) else (1 if (n - 1 - k) % 2 == 0 else 2)
        out.append([vocab[SPK1 if spk == 1 else SPK2]] + tokenize(u.text, vocab))
    return out


def layout(context_ids: list[int], candidate_ids: list[list[int]], span_width: int,
           scheme: str, seq_len: int | None = None):
    """Lay one row out from token ids. Returns (tokens, positions, segments, pad, spans, truncated)."""
    if scheme not in SCHEMES:
        raise ContractError(f"unknown position scheme {scheme!r}; expected one of {SCHEMES}")
    if not candidate_ids:
        raise ContractError("assemble needs at least one candidate (M = 0)")
    lc = len(context_ids)
    m = len(candidate_ids)
    t = lc + m * span_width
    seq_len = t if seq_len is None else seq_len
    if seq_len < t:
        raise ContractError(f"row needs {t} positions, only {seq_len} available")
    tokens = np.zeros(seq_len, dtype=np.int64)
    positions = np.zeros(seq_len, dtype=np.int64)
    segments = np.zeros(seq_len, dtype=np.int64)
    pad = np.ones(seq_len, dtype=bool)
    tokens[:lc] = context_ids
    positions[:lc] = np.arange(lc)
    pad[:lc] = False
    spans = []
    truncated = 0
    cls_id, sep_id = RESERVED.index(CLS), RESERVED.index(SEP)
    for i, cand in enumerate(candidate_ids):
        body = list(cand)
        if len(body) > span_width - 2:
            truncated += 1
            body = body[:span_width - 2]
        piece = [cls_id] + body + [sep_id]
        start = lc + i * span_width
        end = start + span_width
        tokens[start:start + len(piece)] = piece
        pad[start:start + len(piece)] = False
        segments[start:end] = 1
        first = lc if scheme == "repeated" else start
        positions[start:end] = np.arange(first, first + span_width)
        spans.append((start, end))
    # trailing padding keeps counting so positions stay in range
    if seq_len > t:
        positions[t:] = np.arange(t, seq_len) if scheme == "sequential" else 0
    return tokens, positions, segments, pad, spans, truncated


def _fit_context(ctx: list[list[int]], budget: int) -> tuple[list[int], int]:
    """Drop oldest utterances, then oldest tokens, until the context fits ``budget``."""
    kept: list[list[int]] = []
    total = 0
    for utt in reversed(ctx):
        if total + len(utt) > budget:
            room = budget - total
            if not kept and room > 0:
                # single turn too long: keep its speaker token plus the newest words
                kept.append([utt[0]] + utt[len(utt) - room + 1:] if room > 1 else utt[:1])
                total += len(kept[-1])
            break
        kept.append(utt)
        total += len(utt)
    flat = [tok for utt in reversed(kept) for tok in utt]
    dropped = sum(len(u) for u in ctx) - len(flat)
    return flat, dropped


def candidate_width(dialogues, vocab: Vocab) -> int:
    return max(len(tokenize(c, vocab)) for d in dialogues for c in d.candidates) + 2


def assemble(dialogue: Dialogue, vocab: Vocab, scheme: str = "repeated", max_len: int = 512,
             span_width: int | None = None) -> EncodedBatch:
    """Encode one dialogue as a single-row batch."""
    return assemble_batch([dialogue], vocab, scheme, max_len, span_width)


def assemble_batch(dialogues, vocab: Vocab, scheme: str = "repeated", max_len: int = 512,
                   span_width: int | None = None) -> EncodedBatch:
    dialogues = list(dialogues)
    if not dialogues:
        raise ContractError("assemble_batch needs at least one dialogue")
    m = len(dialogues[0].candidates)
    if any(len(d.candidates) != m for d in dialogues):
        raise ContractError("all dialogues in a batch must have the same number of candidates")
    width = candidate_width(dialogues, vocab) if span_width is None else span_width
    if width < 2:
        raise ContractError(f"span width {width} cannot hold [CLS] and [SEP]")
    budget = max_len - m * width
    if budget < 1:
        raise ContractError(f"{m} candidates of width {width} leave no room for context in {max_len}")
    contexts = []
    dropped = 0
    for d in dialogues:
        flat, lost = _fit_context(_speaker_ids(d.context, vocab), budget)
        contexts.append(flat)
        dropped += lost
    t = max(len(c) for c in contexts) + m * width
    rows = [layout(c, [tokenize(x, vocab) for x in d.candidates], width, scheme, t)
            for c, d in zip(contexts, dialogues)]
    return EncodedBatch(
        token_ids=np.stack([r[0] for r in rows]),
        position_ids=np.stack([r[1] for r in rows]),
        segment_ids=np.stack([r[2] for r in rows]),
        pad_mask=np.stack([r[3] for r in rows]),
        candidate_spans=[r[4] for r in rows],
        context_len=[len(c) for c in contexts],
        scheme=scheme,
        truncated_candidates=sum(r[5] for r in rows),
        dropped_context_tokens=dropped,
    )


def assemble_ids(context_ids, candidate_ids, span_width: int, scheme: str = "repeated") -> EncodedBatch:
    """Batch of rows built straight from token ids (no truncation).

    ``context_ids[b]`` may be empty, which yields a candidates-only row.
    """
    t = max(len(c) for c in context_ids) + len(candidate_ids[0]) * span_width
    rows = [layout(c, r, span_width, scheme, t) for c, r in zip(context_ids, candidate_ids)]
    return EncodedBatch(
        np.stack([r[0] for r in rows]), np.stack([r[1] for r in rows]),
        np.stack([r[2] for r in rows]), np.stack([r[3] for r in rows]),
        [r[4] for r in rows], [len(c) for c in context_ids], scheme,
        sum(r[5] for r in rows))


def assemble_contexts(dialogues, vocab: Vocab, max_len: int = 512) -> tuple[np.ndarray, np.ndarray]:
    """Context-only rows for separate context encoding: (token_ids, pad_mask)."""
    ctxs = [_fit_context(_speaker_ids(d.context, vocab), max_len)[0] for d in dialogues]
    t = max(len(c) for c in ctxs)
    ids = np.zeros((len(ctxs), t), dtype=np.int64)
    pad = np.ones((len(ctxs), t), dtype=bool)
    for b, c in enumerate(ctxs):
        ids[b, :len(c)] = c
        pad[b, :len(c)] = False
    return ids, pad


# -- corpus files ----------------------------------------------------------

@dataclass
class CorpusRecord:
    context: list[dict]
    candidates: list[str]
    label: int
    split: str = "train"
    extra: dict = field(default_factory=dict)

    def to_dialogue(self) -> Dialogue:
        return Dialogue([Utterance(u["text"], u.get("speaker")) for u in self.context],
                        list(self.candidates), self.label)

    def to_json(self) -> str:
        obj = {"context": self.context, "candidates": self.candidates,
               "label": self.label, "split": self.split}
        obj.update(self.extra)
        return json.dumps(obj, sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> "CorpusRecord":
        obj = json.loads(line)
        rec = cls([dict(u) for u in obj.pop("context")], list(obj.pop("candidates")),
                  int(obj.pop("label")), obj.pop("split", "train"))
        rec.extra = obj
        if not 0 <= rec.label < len(rec.candidates):
            raise ContractError(f"label {rec.label} outside [0, {len(rec.candidates)})")
        return rec


def write_corpus(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def read_corpus(path) -> list[CorpusRecord]:
    with open(path, encoding="utf-8") as fh:
        return [CorpusRecord.from_json(line) for line in fh if line.strip()]
