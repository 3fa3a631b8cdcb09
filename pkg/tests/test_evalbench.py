import json
from fractions import Fraction
from itertools import combinations

import numpy as np
import pytest

from unienc.encoder import Encoder, EncoderConfig
from unienc.evalbench import (average_precision, batch_for_budget, evaluate, latency_bench, map_score, mrr,
                              p_at_1, ranking_metrics, recall_at_k, reports_csv, reports_gnuplot,
                              reports_jsonl, synthetic_dialogue)
from unienc.data import SyntheticTaskSpec, generate
from unienc.inputs import Vocab, assemble
from unienc.paradigms import Paradigm, RankingModel
from unienc.tensor import ContractError


def random_case(rng, c):
    order = [int(i) for i in rng.permutation(c)]
    pos = {int(i) for i in rng.choice(c, size=int(rng.integers(1, 4)), replace=False)}
    return order, pos


def oracle_recall(order, pos, k):
    # every way to choose min(k, |pos|) positives, best-case overlap with the top-k
    need = min(k, len(pos))
    top = set(order[:k])
    return Fraction(max(len(top.intersection(s)) for s in combinations(sorted(pos), need)), need)


def oracle_ap(order, pos):
    total = Fraction(0)
    for p in pos:
        r = order.index(p) + 1
        better = sum(1 for q in pos if order.index(q) + 1 <= r)
        total += Fraction(better, r)
    return total / len(pos)


def test_metrics_match_oracles(rng):
    ranked, positives = [], []
    for _ in range(1000):
        o, p = random_case(rng, 10)
        ranked.append(o)
        positives.append(p)
    for k in (1, 2, 5):
        expected = sum(oracle_recall(o, p, k) for o, p in zip(ranked, positives)) / 1000
        assert recall_at_k(ranked, positives, 10, k) == pytest.approx(float(expected), abs=1e-12)
    rr = sum(Fraction(1, min(o.index(q) for q in p) + 1) for o, p in zip(ranked, positives)) / 1000
    assert mrr(ranked, positives) == pytest.approx(float(rr), abs=1e-12)
    ap = sum(oracle_ap(o, p) for o, p in zip(ranked, positives)) / 1000
    assert map_score(ranked, positives) == pytest.approx(float(ap), abs=1e-12)
    p1 = sum(o[0] in p for o, p in zip(ranked, positives)) / 1000
    assert p_at_1(ranked, positives) == pytest.approx(p1, abs=1e-12)


def test_mrr_example():
    ranked = [[0, 1, 2, 3], [1, 0, 2, 3], [1, 2, 3, 0]]
    assert abs(mrr(ranked, [{0}] * 3) - 0.58333) < 1e-5


def test_average_precision_example():
    assert average_precision([0, 1, 2, 3], {0, 2}) == pytest.approx(5 / 6, abs=1e-12)


def test_recall_examples():
    assert recall_at_k([[3, 1, 2, 0]], [{0}], 4, 1) == 0.0
    assert recall_at_k([[3, 1, 2, 0]], [{0}], 4, 4) == 1.0
    assert recall_at_k([[3, 1, 2, 0]], [{1, 3}], 4, 1) == 1.0


def test_recall_k_above_pool():
    with pytest.raises(ContractError):
        recall_at_k([[0, 1]], [{0}], 2, 3)


def test_missing_positives_are_skipped_with_count():
    m = ranking_metrics([[0, 1], [1, 0]], [{0}, set()], ks=(1,))
    assert m.n_examples == 1 and m.n_skipped == 1 and m.mrr == 1.0
    assert m.as_dict()["R2@1"] == 1.0


def test_evaluate_groups_pools():
    recs = generate(SyntheticTaskSpec(seed=1, num_candidates=4), 5)
    recs += generate(SyntheticTaskSpec(seed=2, num_candidates=6), 3)
    vocab = Vocab.build([u["text"] for r in recs for u in r.context] + [c for r in recs for c in r.candidates])
    enc = Encoder(EncoderConfig(vocab_size=len(vocab), layers=1, heads=2, model_dim=8, ff_dim=16, dropout=0.0))
    m = evaluate(RankingModel(enc, "uni", vocab), recs, batch_size=2)
    assert m.n_examples == 8 and set(m.recall) == {(4, 1), (4, 2), (6, 1), (6, 2), (6, 5)}


# -- latency -----------------------------------------------------------------

SMALL = EncoderConfig(vocab_size=40, layers=1, heads=2, model_dim=8, ff_dim=16, dropout=0.0, max_len=128)


def test_synthetic_dialogue_geometry(rng):
    d = synthetic_dialogue(40, 12, 5, 3, rng)
    b = assemble(d, Vocab([f"t{i}" for i in range(33)]))
    assert b.context_len == [12]
    assert [e - s for s, e in b.candidate_spans[0]] == [5, 5, 5]
    assert not b.pad_mask.any()


def test_small_bench_pass_counts():
    reps = latency_bench(["uni", "bi", "poly", "cross"], (2, 5), context_len=8, cand_len=4, repeats=2,
                         cfg=SMALL, batch_size=2)
    passes = {(r.paradigm, r.pool_size): r.passes for r in reps}
    assert passes == {("uni", 2): 1, ("bi", 2): 2, ("poly", 2): 2, ("cross", 2): 2,
                      ("uni", 5): 1, ("bi", 5): 2, ("poly", 5): 2, ("cross", 5): 5}
    assert all(r.median_ms > 0 and r.batch_size == 2 for r in reps)


def test_cross_latency_grows_with_pool():
    reps = latency_bench(["cross"], (2, 16), context_len=16, cand_len=4, repeats=3, cfg=SMALL, batch_size=2)
    assert reps[1].median_ms > reps[0].median_ms


def test_warmup_floor():
    with pytest.raises(ContractError):
        latency_bench(warmup=2)


def test_batch_budget_shrinks_with_length():
    cfg = EncoderConfig()
    small = batch_for_budget(Paradigm.UNI, cfg, 256, 32, 10, 256)
    big = batch_for_budget(Paradigm.UNI, cfg, 256, 32, 100, 256)
    assert small > big >= 1


def test_report_formats():
    reps = latency_bench(["uni", "cross"], (2, 3), context_len=6, cand_len=3, repeats=2, cfg=SMALL,
                         batch_size=1)
    csv_lines = reports_csv(reps).splitlines()
    assert csv_lines[0].startswith("paradigm,pool_size") and len(csv_lines) == 5
    rows = [json.loads(line) for line in reports_jsonl(reps).splitlines()]
    assert [r["paradigm"] for r in rows] == ["uni", "cross", "uni", "cross"]
    gp = reports_gnuplot(reps).splitlines()
    assert gp[0] == "# pool " + " ".join(p.value for p in Paradigm if p.value in ("uni", "cross"))
    assert [line.split()[0] for line in gp[1:]] == ["2", "3"]
    assert all(np.isfinite(float(x)) for line in gp[1:] for x in line.split())
