import numpy as np
import pytest

from unienc import tensor as T
from unienc.encoder import Encoder, EncoderConfig, aggregate, mean_pool, pooling_weights
from unienc.inputs import Dialogue, EncodedBatch, Utterance, Vocab, assemble_batch
from unienc.masks import mask_for_batch
from unienc.tensor import ContractError, Tensor
from unienc.training import mlm_corrupt

from conftest import random_dialogue, tiny_config


def run(enc, batch, kind, sees=True):
    with T.no_grad():
        return enc(batch, mask_for_batch(kind, batch, enc.cfg.layers, sees))


def swap_candidates(d: Dialogue, i, j) -> Dialogue:
    c = list(d.candidates)
    c[i], c[j] = c[j], c[i]
    return Dialogue(d.context, c)


def test_arrow_equals_square_bitwise_with_one_candidate(tiny_encoder, small_vocab, rng):
    for _ in range(5):
        b = assemble_batch([random_dialogue(rng, m=1) for _ in range(3)], small_vocab)
        a, s = run(tiny_encoder, b, "arrow"), run(tiny_encoder, b, "square")
        assert a.token_states.data.tobytes() == s.token_states.data.tobytes()


def test_diagonal_ignores_context_to_the_ulp(tiny_encoder, small_vocab, rng):
    d = random_dialogue(rng, m=3)
    b = assemble_batch([d], small_vocab)
    before = run(tiny_encoder, b, "diagonal").candidate_vectors.data
    for _ in range(5):
        ids = b.token_ids.copy()
        lc = b.context_len[0]
        ids[0, :lc] = rng.integers(7, len(small_vocab), size=lc)
        b2 = EncodedBatch(ids, b.position_ids, b.segment_ids, b.pad_mask, b.candidate_spans, b.context_len)
        after = run(tiny_encoder, b2, "diagonal").candidate_vectors.data
        assert after.tobytes() == before.tobytes()


def test_arrow_repeated_positions_permutation(tiny_encoder, small_vocab, rng):
    for _ in range(10):
        d = random_dialogue(rng, m=3)
        width = max(len(c.split()) for c in d.candidates) + 2
        a = run(tiny_encoder, assemble_batch([d], small_vocab, span_width=width), "arrow")
        b = run(tiny_encoder, assemble_batch([swap_candidates(d, 1, 2)], small_vocab, span_width=width), "arrow")
        va, vb = a.candidate_vectors.data[0], b.candidate_vectors.data[0]
        np.testing.assert_allclose(vb[[0, 2, 1]], va, atol=1e-12, rtol=0)


def test_arrow_sequential_positions_break_permutation(tiny_encoder, small_vocab, rng):
    worst = 0.0
    for _ in range(10):
        d = random_dialogue(rng, m=3)
        a = run(tiny_encoder, assemble_batch([d], small_vocab, "sequential"), "arrow")
        b = run(tiny_encoder, assemble_batch([swap_candidates(d, 1, 2)], small_vocab, "sequential"), "arrow")
        worst = max(worst, np.abs(b.candidate_vectors.data[0][[0, 2, 1]] - a.candidate_vectors.data[0]).max())
    assert worst > 1e-3


def _vary_candidate(b: EncodedBatch, j, rng, vocab_size):
    ids = b.token_ids.copy()
    s, e = b.candidate_spans[0][j]
    body = np.arange(s + 1, e - 1)
    body = body[~b.pad_mask[0, body]]
    ids[0, body] = rng.integers(7, vocab_size, size=body.size)
    return EncodedBatch(ids, b.position_ids, b.segment_ids, b.pad_mask, b.candidate_spans, b.context_len)


@pytest.mark.parametrize("layers,sees,leaks", [(2, False, False), (1, True, False), (2, True, True)])
def test_arrow_cross_candidate_leakage(layers, sees, leaks, small_vocab, rng):
    enc = Encoder(tiny_config(len(small_vocab), layers=layers, init_std=0.5), rng=np.random.default_rng(3))
    diffs = []
    for _ in range(5):
        d = Dialogue([Utterance("w1 w2 w3")], ["w4 w5 w6", "w7 w8 w9"])
        b = assemble_batch([d], small_vocab)
        base = run(enc, b, "arrow", sees).candidate_vectors.data[0, 0]
        other = run(enc, _vary_candidate(b, 1, rng, len(small_vocab)), "arrow", sees).candidate_vectors.data[0, 0]
        diffs.append(np.abs(base - other).max())
    if leaks:
        assert max(diffs) > 1e-6
    else:
        assert max(diffs) == 0.0


def test_blocked_pairs_do_not_matter(tiny_encoder, small_vocab, rng):
    """Changing a key that no query may see leaves every state unchanged."""
    d = Dialogue([Utterance("w1 w2")], ["w3 w4", "w5"])
    b = assemble_batch([d], small_vocab)
    s, e = b.candidate_spans[0][1]
    assert b.pad_mask[0, e - 1]
    ids = b.token_ids.copy()
    ids[0, e - 1] = 9  # padded slot: no non-pad query sees it
    b2 = EncodedBatch(ids, b.position_ids, b.segment_ids, b.pad_mask, b.candidate_spans, b.context_len)
    x, y = run(tiny_encoder, b, "arrow").token_states.data, run(tiny_encoder, b2, "arrow").token_states.data
    keep = ~b.pad_mask[0]
    assert x[0, keep].tobytes() == y[0, keep].tobytes()


# -- aggregation -------------------------------------------------------------

def _batch(spans, pad, ids=None):
    t = len(pad)
    ids = np.full((1, t), 9) if ids is None else ids
    lc = spans[0][0]
    return EncodedBatch(ids, np.zeros((1, t), dtype=np.int64), np.zeros((1, t), dtype=np.int64),
                        np.array([pad]), [spans], [lc])


def test_aggregate_constant_span():
    v = np.array([1.0, -2.0, 3.0])
    states = Tensor(np.tile(v, (1, 5, 1)))
    out = aggregate(states, _batch([(2, 5)], [False] * 5))
    np.testing.assert_allclose(out.data[0, 0], v, atol=1e-15)


def test_aggregate_excludes_padding():
    states = Tensor(np.array([[[0.0], [0.0], [4.0], [100.0]]]))
    out = aggregate(states, _batch([(2, 4)], [False, False, False, True]))
    assert out.data[0, 0, 0] == 4.0


def test_aggregate_matches_loop_oracle(small_vocab, rng):
    ds = [random_dialogue(rng, m=3) for _ in range(4)]
    b = assemble_batch(ds, small_vocab)
    states = rng.normal(size=(*b.token_ids.shape, 5))
    for include in (True, False):
        out = aggregate(Tensor(states), b, "avg_tokens", include).data
        for r in range(4):
            for j, (s, e) in enumerate(b.candidate_spans[r]):
                rows = [p for p in range(s, e) if not b.pad_mask[r, p]
                        and (include or b.token_ids[r, p] not in (2, 3))]
                acc = np.zeros(5)
                for p in rows:
                    acc += states[r, p]
                np.testing.assert_allclose(out[r, j], acc / len(rows), atol=1e-12, rtol=0)
    cls = aggregate(Tensor(states), b, "cls").data
    for r in range(4):
        for j, (s, _) in enumerate(b.candidate_spans[r]):
            np.testing.assert_array_equal(cls[r, j], states[r, s])


def test_aggregate_fully_padded_span_is_error():
    with pytest.raises(ContractError):
        pooling_weights(_batch([(2, 4)], [False, False, True, True]))


def test_mean_pool():
    states = Tensor(np.array([[[1.0], [3.0], [50.0]]]))
    assert mean_pool(states, np.array([[False, False, True]])).data.tolist() == [[2.0]]


# -- mlm head and contracts ----------------------------------------------------

def test_mlm_logits_shape_and_zero_head(tiny_encoder, small_vocab, rng):
    b = assemble_batch([random_dialogue(rng) for _ in range(2)], small_vocab)
    out = tiny_encoder(b, mask_for_batch("arrow", b, 2), with_mlm=True)
    assert out.mlm_logits.shape == (*b.token_ids.shape, len(small_vocab))
    tiny_encoder.params["mlm.w"].data[:] = 0.0
    tiny_encoder.params["mlm.b"].data[:] = 0.0
    assert not tiny_encoder.mlm_logits(out.token_states).data.any()


def test_mlm_loss_decreases(small_vocab):
    from unienc.training import AdamW, OptimConfig
    rng = np.random.default_rng(0)
    sentences = [Dialogue([Utterance(" ".join(f"w{(i + k) % 20}" for k in range(6)))], ["w0"]) for i in range(20)]
    enc = Encoder(tiny_config(len(small_vocab), model_dim=16, ff_dim=32), rng=np.random.default_rng(1))
    opt = AdamW(enc.params, OptimConfig(weight_decay=0.0))
    b = assemble_batch(sentences, small_vocab)
    sched = mask_for_batch("diagonal", b, 2)
    losses = []
    for step in range(50):
        ids, rows, cols, targets = mlm_corrupt(b.token_ids, b.pad_mask, 0.3, np.random.default_rng(step % 5),
                                               len(small_vocab))
        states = enc.encode(ids, b.position_ids, b.segment_ids, sched)
        loss = T.cross_entropy(enc.mlm_logits_at(states, rows, cols), targets)
        opt.zero_grad()
        T.backward(loss)
        opt.step(3e-3)
        losses.append(loss.item())
    assert np.mean(losses[-5:]) < np.mean(losses[:5]) - 0.5


def test_geometry_mismatch(tiny_encoder, small_vocab, rng):
    b = assemble_batch([random_dialogue(rng)], small_vocab)
    other = assemble_batch([random_dialogue(rng, m=5)], small_vocab)
    with pytest.raises(ContractError):
        tiny_encoder(b, mask_for_batch("arrow", other, 2))
    with pytest.raises(ContractError):
        tiny_encoder(b, mask_for_batch("arrow", b, 3))


def test_config_checks():
    with pytest.raises(ContractError):
        EncoderConfig(model_dim=10, heads=4)
    with pytest.raises(ContractError):
        EncoderConfig(aggregation="max")
    cfg = EncoderConfig(layers=3)
    assert EncoderConfig.from_dict(cfg.to_dict()) == cfg


def test_pass_counter(tiny_encoder, small_vocab, rng):
    b = assemble_batch([random_dialogue(rng)], small_vocab)
    before = tiny_encoder.passes
    run(tiny_encoder, b, "arrow")
    run(tiny_encoder, b, "square")
    assert tiny_encoder.passes - before == 2
