"""Ranking metrics and the cost/latency comparison across paradigms."""
from __future__ import annotations

import csv
import io
import json
import logging
import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .encoder import Encoder, EncoderConfig
from .inputs import RESERVED, CorpusRecord, Dialogue, Utterance, Vocab
from .masks import allowed_pairs
from .paradigms import Paradigm, RankingModel, rank, share
from .tensor import ContractError

log = logging.getLogger(__name__)


# -- metrics ---------------------------------------------------------------
# ``ranked`` is a sequence of per-example candidate orders (best first);
# ``positives`` the matching sequence of positive-index collections.

def _check(ranked, positives):
    if len(ranked) != len(positives):
        raise ContractError(f"{len(ranked)} rankings but {len(positives)} positive sets")


def recall_at_k(ranked, positives, c: int, k: int) -> float:
    """R_c@k. With several positives, credit is |pos in top-k| / min(k, |pos|)."""
    _check(ranked, positives)
    if k > c:
        raise ContractError(f"R_{c}@{k}: k exceeds the pool size")
    total = 0.0
    n = 0
    for order, pos in zip(ranked, positives):
        pos = set(pos)
        if not pos:
            raise ContractError("recall_at_k: example without positives")
        if len(order) != c:
            raise ContractError(f"R_{c}@{k}: pool of size {len(order)}")
        hits = len(pos.intersection(order[:k]))
        total += hits / min(k, len(pos))
        n += 1
    return total / n if n else 0.0


def reciprocal_ranks(ranked, positives) -> list[float | None]:
    out = []
    for order, pos in zip(ranked, positives):
        pos = set(pos)
        hit = next((i for i, c in enumerate(order) if c in pos), None)
        out.append(None if hit is None else 1.0 / (hit + 1))
    return out


def mrr(ranked, positives) -> float:
    """Mean reciprocal rank of the best-ranked positive; examples without one are skipped."""
    _check(ranked, positives)
    rr = [x for x in reciprocal_ranks(ranked, positives) if x is not None]
    skipped = len(ranked) - len(rr)
    if skipped:
        log.warning("mrr: skipped %d examples without a positive", skipped)
    return float(np.mean(rr)) if rr else 0.0


def average_precision(order, pos) -> float:
    pos = set(pos)
    if not pos:
        return 0.0
    hits = 0
    acc = 0.0
    for i, c in enumerate(order):
        if c in pos:
            hits += 1
            acc += hits / (i + 1)
    return acc / len(pos)


def map_score(ranked, positives) -> float:
    _check(ranked, positives)
    return float(np.mean([average_precision(o, p) for o, p in zip(ranked, positives)])) if ranked else 0.0


def p_at_1(ranked, positives) -> float:
    _check(ranked, positives)
    return float(np.mean([1.0 if o and o[0] in set(p) else 0.0
                          for o, p in zip(ranked, positives)])) if ranked else 0.0


@dataclass
class RankingMetrics:
    recall: dict = field(default_factory=dict)
    mrr: float = 0.0
    map: float = 0.0
    p_at_1: float = 0.0
    n_examples: int = 0
    n_skipped: int = 0

    def as_dict(self) -> dict:
        d = {f"R{c}@{k}": v for (c, k), v in sorted(self.recall.items())}
        d.update(MRR=self.mrr, MAP=self.map, P1=self.p_at_1, n=self.n_examples, skipped=self.n_skipped)
        return d


def ranking_metrics(ranked, positives, ks=(1, 2, 5)) -> RankingMetrics:
    _check(ranked, positives)
    keep = [(o, p) for o, p in zip(ranked, positives) if set(p)]
    skipped = len(ranked) - len(keep)
    out = RankingMetrics(n_examples=len(keep), n_skipped=skipped)
    if not keep:
        return out
    pools: dict[int, list] = {}
    for o, p in keep:
        pools.setdefault(len(o), []).append((o, p))
    for c, group in sorted(pools.items()):
        rs, ps = [g[0] for g in group], [g[1] for g in group]
        for k in ks:
            if k <= c:
                out.recall[(c, k)] = recall_at_k(rs, ps, c, k)
    rs, ps = [g[0] for g in keep], [g[1] for g in keep]
    out.mrr = mrr(rs, ps)
    out.map = map_score(rs, ps)
    out.p_at_1 = p_at_1(rs, ps)
    return out


def evaluate(model: RankingModel, records, batch_size: int = 8, ks=(1, 2, 5)) -> RankingMetrics:
    """Score every record against its own candidate pool."""
    ranked, positives = [], []
    groups: dict[int, list] = {}
    for rec in records:
        groups.setdefault(len(rec.candidates), []).append(rec)
    for recs in groups.values():
        for i in range(0, len(recs), batch_size):
            chunk = recs[i:i + batch_size]
            scores = model.score([r.to_dialogue() for r in chunk])
            for rec, row in zip(chunk, scores):
                ranked.append(rank(row))
                positives.append(set(rec.extra.get("positives", [rec.label])))
    return ranking_metrics(ranked, positives, ks)


# -- latency ---------------------------------------------------------------

@dataclass
class BenchReport:
    paradigm: str
    pool_size: int
    context_len: int
    cand_len: int
    batch_size: int
    mean_ms: float
    median_ms: float
    p95_ms: float
    passes: int
    allowed_pairs: int
    repeats: int
    backend: str = ""
    note: str = ""


def synthetic_dialogue(vocab_size: int, context_len: int, cand_len: int, pool: int,
                       rng: np.random.Generator) -> Dialogue:
    """Dialogue whose assembled context is exactly ``context_len`` tokens and whose
    candidates fill spans of exactly ``cand_len`` (including [CLS]/[SEP])."""
    if context_len < 2 or cand_len < 3:
        raise ContractError("bench geometry needs L_c >= 2 and L_r >= 3")
    lo = len(RESERVED)
    words = [f"t{i}" for i in range(vocab_size - lo)]

    def text(n):
        return " ".join(words[i] for i in rng.integers(0, len(words), size=n))
    ctx = [Utterance(text(context_len - 1), 1)]
    return Dialogue(ctx, [text(cand_len - 2) for _ in range(pool)], 0)


def bench_vocab(vocab_size: int) -> Vocab:
    return Vocab([f"t{i}" for i in range(vocab_size - len(RESERVED))])


def batch_for_budget(paradigm: Paradigm, cfg: EncoderConfig, lc: int, lr: int, m: int,
                     budget_mb: float) -> int:
    """Contexts per batch that keep one pass's attention maps under ``budget_mb``.

    Cross runs M passes of length L_c + L_r, the others one pass of their own
    length; the estimate counts float64 scores and probabilities per layer.
    """
    if paradigm is Paradigm.CROSS:
        t = lc + lr
    elif paradigm is Paradigm.UNI:
        t = lc + m * lr
    else:
        t = max(lc, m * lr)
    per_ctx = 2 * 8 * cfg.heads * t * t * cfg.layers + 8 * t * (4 * cfg.model_dim + cfg.ff_dim) * cfg.layers
    return max(1, int(budget_mb * 2**20 // per_ctx))


def _time(fn, repeats: int, warmup: int, min_run_s: float):
    for _ in range(warmup):
        fn()
    t0 = time.perf_counter()
    fn()
    single = time.perf_counter() - t0
    inner = 1
    note = ""
    if single < min_run_s:
        inner = int(np.ceil(min_run_s / max(single, 1e-9)))
        note = f"timer resolution: {inner} calls per sample"
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        samples.append((time.perf_counter() - t0) / inner)
    return samples, note


def latency_bench(paradigms=("uni", "cross"), pool_sizes=(10,), context_len: int = 256,
                  cand_len: int = 32, repeats: int = 5, warmup: int = 3,
                  cfg: EncoderConfig | None = None, batch_size: int | None = None,
                  budget_mb: float = 256.0, single_thread: bool = True, seed: int = 0,
                  min_run_s: float = 1e-3) -> list[BenchReport]:
    """Time inference per context for each paradigm and pool size on shared weights."""
    from . import _kernels
    if warmup < 3:
        raise ContractError("latency_bench needs at least 3 warmup iterations")
    paradigms = [Paradigm.parse(p) for p in paradigms]
    need = context_len + max(pool_sizes) * cand_len
    cfg = cfg or EncoderConfig(dropout=0.0, max_len=max(512, need))
    if cfg.max_len < need:
        raise ContractError(f"encoder max_len {cfg.max_len} < assembled length {need}")
    vocab = bench_vocab(cfg.vocab_size)
    rng = np.random.default_rng(seed)
    encoder = Encoder(cfg, rng=rng)
    base = RankingModel(encoder, Paradigm.UNI, vocab, rng=rng)
    models = {p: base if p is Paradigm.UNI else share(base, p) for p in paradigms}
    limiter = None
    if single_thread:
        from threadpoolctl import threadpool_limits
        limiter = threadpool_limits(limits=1)
    reports = []
    try:
        for m in pool_sizes:
            for p in paradigms:
                bs = batch_size or batch_for_budget(p, cfg, context_len, cand_len, m, budget_mb)
                dialogues = [synthetic_dialogue(cfg.vocab_size, context_len, cand_len, m, rng)
                             for _ in range(bs)]
                model = models[p]
                before = encoder.passes
                with T.no_grad():
                    model.forward(dialogues)
                passes = encoder.passes - before

                def run():
                    with T.no_grad():
                        model.forward(dialogues)
                samples, note = _time(run, repeats, warmup, min_run_s)
                per_ctx = [s / bs * 1e3 for s in samples]
                kind = p.mask_kind
                reports.append(BenchReport(
                    paradigm=p.value, pool_size=m, context_len=context_len, cand_len=cand_len,
                    batch_size=bs, mean_ms=float(np.mean(per_ctx)), median_ms=float(statistics.median(per_ctx)),
                    p95_ms=float(np.percentile(per_ctx, 95)), passes=passes,
                    allowed_pairs=allowed_pairs(kind, context_len, cand_len, m),
                    repeats=repeats, backend=_kernels.BACKEND, note=note))
    finally:
        if limiter is not None:
            limiter.unregister()
    return reports


def reports_csv(reports) -> str:
    buf = io.StringIO()
    names = list(BenchReport.__dataclass_fields__)
    w = csv.DictWriter(buf, fieldnames=names, lineterminator="\n")
    w.writeheader()
    for r in reports:
        w.writerow(asdict(r))
    return buf.getvalue()


def reports_jsonl(reports) -> str:
    return "".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in reports)


def reports_gnuplot(reports) -> str:
    """Whitespace columns: pool size, then median ms per context for each paradigm."""
    paradigms = sorted({r.paradigm for r in reports}, key=[p.value for p in Paradigm].index)
    table: dict[int, dict[str, float]] = {}
    for r in reports:
        table.setdefault(r.pool_size, {})[r.paradigm] = r.median_ms
    lines = ["# pool " + " ".join(paradigms)]
    for m in sorted(table):
        lines.append(f"{m} " + " ".join(f"{table[m].get(p, float('nan')):.6g}" for p in paradigms))
    return "\n".join(lines) + "\n"
