"""Synthetic ranking corpora and ingestion of tab-separated response-selection files."""
from __future__ import annotations

import logging
import os
from dataclasses import asdict, dataclass

import numpy as np

from .inputs import CorpusRecord, split_words, write_corpus

log = logging.getLogger(__name__)

RULES = ("keyword-echo", "arithmetic-next", "copy-last-token")
DISTRACTORS = ("random", "hard")
SPLITS = ("train", "valid", "test")


class ConfigError(ValueError):
    pass


@dataclass
class SyntheticTaskSpec:
    vocab_size: int = 200
    turns: int = 2
    turn_len: int = 5
    cand_len: int = 4
    num_candidates: int = 10
    rule: str = "keyword-echo"
    distractors: str = "random"
    n_keywords: int = 2
    keyword_types: int = 50
    seed: int = 0

    def validate(self) -> None:
        if self.rule not in RULES:
            raise ConfigError(f"rule must be one of {RULES}, got {self.rule!r}")
        if self.distractors not in DISTRACTORS:
            raise ConfigError(f"distractors must be one of {DISTRACTORS}, got {self.distractors!r}")
        if min(self.turns, self.turn_len, self.cand_len, self.num_candidates) < 1:
            raise ConfigError("turns, turn_len, cand_len and num_candidates must be >= 1")
        if self.rule == "keyword-echo":
            fillers = self.vocab_size - self.keyword_types
            if self.n_keywords < 1 or self.cand_len < self.n_keywords:
                raise ConfigError(f"keyword-echo needs 1 <= n_keywords <= cand_len, got "
                                  f"{self.n_keywords}, {self.cand_len}")
            if self.keyword_types < 2 * self.n_keywords:
                raise ConfigError(f"{self.keyword_types} keyword types cannot hold {self.n_keywords} "
                                  "context keywords plus as many foreign ones")
            if fillers < 2 or self.turns * self.turn_len < self.n_keywords:
                raise ConfigError("vocabulary or context too small for keyword-echo")
        else:
            if self.vocab_size < self.num_candidates + 1:
                raise ConfigError(f"vocab {self.vocab_size} too small for {self.num_candidates} "
                                  "distinct first tokens")
            if self.rule == "arithmetic-next" and self.vocab_size < self.turns * self.turn_len + self.cand_len:
                raise ConfigError("vocab too small for non-wrapping arithmetic runs")


def _lexicon(spec: SyntheticTaskSpec):
    if spec.rule == "keyword-echo":
        return ([f"k{i}" for i in range(spec.keyword_types)],
                [f"w{i}" for i in range(spec.vocab_size - spec.keyword_types)])
    if spec.rule == "arithmetic-next":
        return [], [f"n{i}" for i in range(spec.vocab_size)]
    return [], [f"w{i}" for i in range(spec.vocab_size)]


def satisfies(spec: SyntheticTaskSpec, context_words: list[str], cand_words: list[str]) -> bool:
    """Whether a candidate satisfies the task rule for this context."""
    if spec.rule == "keyword-echo":
        kws = {w for w in context_words if w.startswith("k")}
        return bool(kws) and kws.issubset(cand_words)
    if spec.rule == "arithmetic-next":
        last = int(context_words[-1][1:])
        return cand_words[0] == f"n{(last + 1) % spec.vocab_size}"
    return cand_words[0] == context_words[-1]


def _one(spec: SyntheticTaskSpec, rng: np.random.Generator, split: str, max_tries: int = 1000):
    keywords, fillers = _lexicon(spec)
    n_ctx = spec.turns * spec.turn_len
    lr = spec.cand_len

    def pick(pool, n):
        return [pool[i] for i in rng.integers(0, len(pool), size=n)]

    if spec.rule == "keyword-echo":
        kw_idx = rng.choice(len(keywords), size=spec.n_keywords, replace=False)
        ctx_kw = [keywords[i] for i in kw_idx]
        ctx = pick(fillers, n_ctx)
        slots = rng.choice(n_ctx, size=spec.n_keywords, replace=False)
        for s, k in zip(slots, ctx_kw):
            ctx[s] = k
        foreign = [k for k in keywords if k not in ctx_kw]

        def shuffled(words):
            return [words[i] for i in rng.permutation(len(words))]
        positive = shuffled(ctx_kw + pick(fillers, lr - spec.n_keywords))

        def distractor():
            if spec.distractors == "hard":
                keep = list(rng.choice(ctx_kw, size=spec.n_keywords - 1, replace=False))
                body = keep + pick(foreign, 1)
            else:
                body = [foreign[i] for i in rng.choice(len(foreign), size=spec.n_keywords, replace=False)]
            return shuffled(body + pick(fillers, lr - len(body)))
    elif spec.rule == "arithmetic-next":
        start = int(rng.integers(0, spec.vocab_size - n_ctx - lr + 1))
        ctx = [f"n{start + i}" for i in range(n_ctx)]
        positive = [f"n{start + n_ctx + i}" for i in range(lr)]

        def distractor():
            if spec.distractors == "hard":
                return [f"n{int(rng.integers(0, spec.vocab_size))}"] + positive[1:]
            s = int(rng.integers(0, spec.vocab_size - lr + 1))
            return [f"n{s + i}" for i in range(lr)]
    else:
        ctx = pick(fillers, n_ctx)
        positive = [ctx[-1]] + pick(fillers, lr - 1)

        def distractor():
            if spec.distractors == "hard":
                return pick(fillers, 1) + positive[1:]
            return pick(fillers, lr)

    cands = [positive]
    seen = {" ".join(positive)}
    tries = 0
    while len(cands) < spec.num_candidates:
        tries += 1
        if tries > max_tries:
            raise ConfigError(f"could not draw {spec.num_candidates} distinct rule-breaking distractors")
        d = distractor()
        key = " ".join(d)
        if key in seen or satisfies(spec, ctx, d):
            continue
        seen.add(key)
        cands.append(d)
    if not satisfies(spec, ctx, positive):
        raise ConfigError("generated positive breaks the rule")
    order = rng.permutation(len(cands))
    label = int(np.flatnonzero(order == 0)[0])
    context = [{"speaker": 1 + (t % 2), "text": " ".join(ctx[t * spec.turn_len:(t + 1) * spec.turn_len])}
               for t in range(spec.turns)]
    return CorpusRecord(context, [" ".join(cands[i]) for i in order], label, split)


def generate(spec: SyntheticTaskSpec, n_records: int, split: str = "train") -> list[CorpusRecord]:
    """Deterministic records for one split; the split name salts the seed."""
    spec.validate()
    if split not in SPLITS:
        raise ConfigError(f"split must be one of {SPLITS}")
    rng = np.random.default_rng([spec.seed, SPLITS.index(split)])
    return [_one(spec, rng, split) for _ in range(n_records)]


def generate_files(spec: SyntheticTaskSpec, out_dir, n_train: int, n_valid: int, n_test: int) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    for split, n in zip(SPLITS, (n_train, n_valid, n_test)):
        path = os.path.join(out_dir, f"{split}.jsonl")
        write_corpus(path, generate(spec, n, split))
        paths[split] = path
    with open(os.path.join(out_dir, "task.txt"), "w", encoding="utf-8") as fh:
        fh.write("".join(f"{k}={v}\n" for k, v in asdict(spec).items()))
    return paths


def shuffle_candidates(rec: CorpusRecord, rng: np.random.Generator) -> CorpusRecord:
    order = rng.permutation(len(rec.candidates))
    label = int(np.flatnonzero(order == rec.label)[0])
    return CorpusRecord([dict(u) for u in rec.context], [rec.candidates[i] for i in order],
                        label, rec.split, dict(rec.extra))


def overlap_scores(rec: CorpusRecord) -> list[int]:
    """Bag-of-words overlap between the context and each candidate."""
    ctx = set(w for u in rec.context for w in split_words(u["text"]))
    return [len(ctx.intersection(split_words(c))) for c in rec.candidates]


# -- ingestion -------------------------------------------------------------

class IngestError(ValueError):
    pass


@dataclass
class IngestReport:
    records: int = 0
    lines: int = 0
    malformed: int = 0
    incomplete_groups: int = 0
    dropped_negatives: int = 0


def _parse_line(line: str):
    fields = line.rstrip("\n").split("\t")
    if len(fields) < 3 or fields[0].strip() not in ("0", "1"):
        return None
    utts = [f.strip() for f in fields[1:-1]]
    if not any(utts) or not fields[-1].strip():
        return None
    return int(fields[0]), tuple(utts), fields[-1].strip()


def _context(utts):
    return [{"speaker": None, "text": u} for u in utts if u]


def ingest_ubuntu(path, out_path, split: str = "test", group_size: int = 10) -> IngestReport:
    """Convert ``label<TAB>utt_1<TAB>...<TAB>utt_N<TAB>response`` lines.

    Evaluation splits group ``group_size`` consecutive lines sharing a context
    into one record with a single positive. Training lines keep their positive
    pairs as one-candidate records (negatives come from the batch later).
    """
    if split not in SPLITS:
        raise ConfigError(f"split must be one of {SPLITS}")
    rep = IngestReport()
    records = []
    group: list = []

    def flush():
        if not group:
            return
        if len(group) < group_size:
            rep.incomplete_groups += 1
            log.warning("ingest: dropping incomplete group of %d lines", len(group))
        else:
            labels = [g[0] for g in group]
            n_pos = sum(labels)
            if n_pos > 1:
                raise IngestError(f"group ending at line {rep.lines} has {n_pos} positives; "
                                  "a single positive per context is assumed")
            if n_pos == 0:
                rep.malformed += len(group)
                log.warning("ingest: group without positive skipped")
            else:
                records.append(CorpusRecord(_context(group[0][1]), [g[2] for g in group],
                                            labels.index(1), split))
        group.clear()

    with open(path, encoding="utf-8", errors="replace") as fh:
        for line in fh:
            if not line.strip():
                continue
            rep.lines += 1
            parsed = _parse_line(line)
            if parsed is None:
                rep.malformed += 1
                log.warning("ingest: malformed line %d skipped", rep.lines)
                continue
            if split == "train":
                if parsed[0] == 1:
                    records.append(CorpusRecord(_context(parsed[1]), [parsed[2]], 0, split))
                else:
                    rep.dropped_negatives += 1
                continue
            if group and (parsed[1] != group[0][1] or len(group) == group_size):
                flush()
            group.append(parsed)
        if split != "train":
            flush()
    write_corpus(out_path, records)
    rep.records = len(records)
    return rep


__all__ = ["SyntheticTaskSpec", "generate", "generate_files", "ingest_ubuntu", "overlap_scores",
           "satisfies", "shuffle_candidates", "ConfigError", "IngestError", "IngestReport"]
