"""Multi-choice training with in-batch negatives, MLM, AdamW and a Noam schedule."""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint
from . import tensor as T
from .inputs import MASK, RESERVED, CorpusRecord, Dialogue, Utterance
from .paradigms import RankingModel
from .tensor import ContractError, Tensor

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class OptimConfig:
    peak_lr: float = 2e-4
    warmup_steps: int = 1000
    beta1: float = 0.9
    beta2: float = 0.98
    weight_decay: float = 0.01
    eps: float = 1e-8

    def __post_init__(self):
        if not 0.0 < self.beta1 < self.beta2 < 1.0:
            raise ContractError(f"need 0 < beta1 < beta2 < 1, got {self.beta1}, {self.beta2}")
        if self.warmup_steps < 1:
            raise ContractError("warmup_steps must be >= 1")


@dataclass
class TrainConfig:
    batch_size: int = 8
    epochs: int = 10
    max_steps: int | None = None
    eval_every: int | None = None
    patience: int = 3
    mlm_rate: float = 0.15
    mlm_weight: float = 1.0
    seed: int = 0


# -- objectives ------------------------------------------------------------

def multi_choice_loss(scores: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy over candidates, one positive per row."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and labels.max() >= scores.shape[1]:
        raise ContractError(f"label {labels.max()} >= M = {scores.shape[1]}")
    return T.cross_entropy(scores, labels)


def total_loss(cls_loss: Tensor, mlm_loss: Tensor | None, mlm_weight: float = 1.0) -> Tensor:
    if mlm_loss is None or mlm_weight == 0.0:
        return cls_loss
    return cls_loss + mlm_loss * mlm_weight


def mlm_corrupt(token_ids: np.ndarray, pad_mask: np.ndarray, rate: float, rng: np.random.Generator,
                vocab_size: int):
    """Select non-special positions with probability ``rate`` and corrupt them.

    Selected positions become [MASK] 80% of the time, a random ordinary token
    10%, and stay unchanged 10%. Returns ``(ids, rows, cols, targets)``.
    """
    if not 0.0 < rate < 1.0:
        raise ContractError(f"mlm rate must lie in (0, 1), got {rate}")
    n_special = len(RESERVED)
    eligible = (token_ids >= n_special) & ~np.asarray(pad_mask, dtype=bool)
    chosen = (rng.random(token_ids.shape) < rate) & eligible
    rows, cols = np.nonzero(chosen)
    targets = token_ids[rows, cols].copy()
    ids = token_ids.copy()
    u = rng.random(rows.size)
    to_mask = u < 0.8
    to_rand = (u >= 0.8) & (u < 0.9)
    ids[rows[to_mask], cols[to_mask]] = RESERVED.index(MASK)
    if vocab_size > n_special:
        ids[rows[to_rand], cols[to_rand]] = rng.integers(n_special, vocab_size, size=int(to_rand.sum()))
    return ids, rows, cols, targets


def corrupter(rate: float, rng: np.random.Generator, vocab_size: int):
    def run(token_ids, pad_mask):
        return mlm_corrupt(token_ids, pad_mask, rate, rng, vocab_size)
    return run


def noam_lr(step: int, warmup: int, peak_lr: float) -> float:
    """Noam schedule rescaled so its maximum (reached at ``step == warmup``) is ``peak_lr``.

    The usual model_dim**-0.5 factor cancels under this normalisation.
    """
    if step < 1:
        raise ContractError(f"noam_lr needs step >= 1, got {step}")
    return peak_lr * math.sqrt(warmup) * min(step ** -0.5, step * warmup ** -1.5)


class AdamW:
    """Adam with decoupled weight decay; decay skips vectors (biases, norms)."""

    def __init__(self, params: dict[str, Tensor], cfg: OptimConfig):
        self.params = params
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float):
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[k]
            v = self.v[k]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + c.eps)
            if c.weight_decay and p.data.ndim > 1:
                update = update + c.weight_decay * p.data
            p.data = p.data - lr * update


def grad_norms(params: dict[str, Tensor]) -> dict[str, float]:
    return {k: float(np.linalg.norm(p.grad)) for k, p in params.items() if p.grad is not None}


# -- batches ---------------------------------------------------------------

def in_batch_problems(pairs, rng: np.random.Generator | None = None):
    """K (context, response) pairs -> K multi-choice problems over the K responses.

    Each problem sees every response of the batch; the candidate order is
    shuffled per problem when ``rng`` is given. Returns ``(dialogues, labels)``.
    """
    responses = [r for _, r in pairs]
    k = len(responses)
    dialogues, labels = [], []
    for i, (ctx, _) in enumerate(pairs):
        order = rng.permutation(k) if rng is not None else np.arange(k)
        dialogues.append(Dialogue(list(ctx), [responses[j] for j in order]))
        labels.append(int(np.flatnonzero(order == i)[0]))
    return dialogues, np.array(labels, dtype=np.int64)


def record_pair(rec: CorpusRecord):
    return [Utterance(u["text"], u.get("speaker")) for u in rec.context], rec.candidates[rec.label]


# -- loop ------------------------------------------------------------------

@dataclass
class TrainResult:
    best_state: dict
    best_r1: float
    steps: int
    history: list = field(default_factory=list)
    losses: list = field(default_factory=list)


def train_step(model: RankingModel, opt: AdamW, dialogues, labels, lr: float, rng,
               corrupt=None, mlm_weight: float = 1.0, step: int = 0):
    res = model.forward(dialogues, training=True, rng=rng, corrupt=corrupt)
    cls = multi_choice_loss(res.logits, labels)
    loss = total_loss(cls, res.mlm_loss, mlm_weight)
    opt.zero_grad()
    if not np.isfinite(loss.data).all():
        raise TrainingDiverged(f"non-finite loss {loss.item()} at step {step}, lr {lr:.3g}")
    T.backward(loss)
    norms = grad_norms(opt.params)
    if not all(np.isfinite(v) for v in norms.values()):
        bad = {k: v for k, v in norms.items() if not np.isfinite(v)}
        raise TrainingDiverged(f"non-finite gradients at step {step}, lr {lr:.3g}: {bad}")
    opt.step(lr)
    mlm = None if res.mlm_loss is None else res.mlm_loss.item()
    return loss.item(), cls.item(), mlm


def validate_in_batch(model: RankingModel, records, batch_size: int) -> dict:
    """R@1 and MRR with in-batch negatives over the positives of ``records``."""
    from .evalbench import mrr, recall_at_k
    pairs = [record_pair(r) for r in records]
    ranked, positives = [], []
    for i in range(0, len(pairs) - batch_size + 1, batch_size):
        dialogues, labels = in_batch_problems(pairs[i:i + batch_size])
        scores = model.score(dialogues)
        for row, lab in zip(scores, labels):
            ranked.append(list(np.argsort(-row, kind="stable")))
            positives.append({int(lab)})
    if not ranked:
        raise ContractError(f"need at least {batch_size} validation records")
    return {"r1": recall_at_k(ranked, positives, batch_size, 1), "mrr": mrr(ranked, positives),
            "n": len(ranked)}


def train(model: RankingModel, train_records, valid_records, optim: OptimConfig | None = None,
          cfg: TrainConfig | None = None, out_dir=None) -> TrainResult:
    """Train with in-batch negatives; keep the parameters with the best validation R@1.

    Stops after ``cfg.patience`` evaluations without improvement. When
    ``out_dir`` is given, writes ``metrics.jsonl`` and ``best.ckpt`` there.
    """
    optim = optim or OptimConfig()
    cfg = cfg or TrainConfig()
    rng = np.random.default_rng(cfg.seed)
    params = model.params
    opt = AdamW(params, optim)
    corrupt = corrupter(cfg.mlm_rate, rng, model.encoder.cfg.vocab_size) if cfg.mlm_weight > 0 else None
    pairs = [record_pair(r) for r in train_records]
    k = cfg.batch_size
    if len(pairs) < k:
        raise ContractError(f"need at least {k} training records for in-batch negatives")
    best_state = {n: p.data.copy() for n, p in params.items()}
    best_r1 = -1.0
    stale = 0
    step = 0
    history, losses = [], []
    metrics_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics_fh = open(os.path.join(out_dir, "metrics.jsonl"), "w", encoding="utf-8")
    window: list[tuple] = []

    def evaluate(epoch):
        nonlocal best_r1, best_state, stale
        val = validate_in_batch(model, valid_records, k)
        rec = {"step": step, "epoch": epoch, "lr": noam_lr(max(step, 1), optim.warmup_steps, optim.peak_lr),
               "loss": float(np.mean([w[0] for w in window])) if window else None,
               "cls_loss": float(np.mean([w[1] for w in window])) if window else None,
               "mlm_loss": (float(np.mean([w[2] for w in window]))
                            if window and window[0][2] is not None else None),
               "valid_r1": val["r1"], "valid_mrr": val["mrr"]}
        window.clear()
        improved = val["r1"] > best_r1
        rec["best"] = improved
        if improved:
            best_r1 = val["r1"]
            best_state = {n: p.data.copy() for n, p in params.items()}
            stale = 0
            if out_dir is not None:
                checkpoint.save(os.path.join(out_dir, "best.ckpt"), best_state)
        else:
            stale += 1
        history.append(rec)
        if metrics_fh is not None:
            metrics_fh.write(json.dumps(rec, sort_keys=True) + "\n")
            metrics_fh.flush()
        log.info("step %d epoch %d valid R@1 %.4f MRR %.4f", step, epoch, val["r1"], val["mrr"])
        return stale >= cfg.patience

    try:
        done = False
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(pairs))
            for i in range(0, len(order) - k + 1, k):
                dialogues, labels = in_batch_problems([pairs[j] for j in order[i:i + k]], rng)
                step += 1
                lr = noam_lr(step, optim.warmup_steps, optim.peak_lr)
                out = train_step(model, opt, dialogues, labels, lr, rng, corrupt, cfg.mlm_weight, step)
                losses.append(out[0])
                window.append(out)
                if cfg.eval_every and step % cfg.eval_every == 0 and evaluate(epoch):
                    done = True
                if done or (cfg.max_steps and step >= cfg.max_steps):
                    done = True
                    break
            if not cfg.eval_every or window:
                if evaluate(epoch):
                    done = True
            if done:
                break
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    for n, p in params.items():
        p.data = best_state[n].copy()
    return TrainResult(best_state, best_r1, step, history, losses)
