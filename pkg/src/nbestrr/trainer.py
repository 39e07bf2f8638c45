"""Training loop: N-homogeneous batching under a token budget, the combined
objectives for both model variants, inverse-sqrt LR schedule, gradient
clipping, periodic dev evaluation with early stopping, and best-checkpoint
retention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import losses, model
from . import tensor as T
from .errors import ConfigurationError, UsageError
from .metrics import edit_stats, query_similarity
from .tokenizer import PAD


@dataclass(frozen=True)
class TrainConfig:
    max_steps: int = 5000
    eval_every: int = 200
    batch_token_budget: int = 1500
    warmup: int = 400
    patience: int = 5
    seed: int = 0
    aux_weight: float = 0.01
    clip_norm: float = 1.0

    def __post_init__(self):
        if self.eval_every < 1 or self.eval_every > self.max_steps:
            raise ConfigurationError(
                f"TrainConfig: eval_every {self.eval_every} outside [1, {self.max_steps}]")
        if self.batch_token_budget < 1:
            raise ConfigurationError("TrainConfig: batch_token_budget must be >= 1")
        if self.warmup < 1 or self.patience < 1:
            raise ConfigurationError("TrainConfig: warmup and patience must be >= 1")
        if self.aux_weight < 0 or self.clip_norm <= 0:
            raise ConfigurationError("TrainConfig: bad aux_weight or clip_norm")


@dataclass
class TrainItem:
    """One tokenized record with its supervision targets."""

    hyp_tokens: list
    target: list
    word_errors: np.ndarray
    similarities: np.ndarray

    @property
    def n(self) -> int:
        return len(self.hyp_tokens)

    @property
    def token_count(self) -> int:
        return sum(len(t) for t in self.hyp_tokens) + len(self.target)


@dataclass
class TrainResult:
    params: dict
    log: list = field(default_factory=list)
    best_dev: float = math.inf
    steps: int = 0
    skipped: int = 0


class EarlyStopper:
    """Stop after `patience` evaluations without strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.rounds_bad = 0
        self.improved = False

    def update(self, metric: float) -> bool:
        self.improved = metric < self.best
        if self.improved:
            self.best = metric
            self.rounds_bad = 0
        else:
            self.rounds_bad += 1
        return self.rounds_bad >= self.patience


def prepare_items(records, vocab) -> list:
    """Tokenize records and precompute word errors and similarity targets."""
    items = []
    for rec in records:
        hyp_tokens = [vocab.encode(" ".join(h.words)) for h in rec.hypotheses]
        errors = np.array([float(edit_stats(h.words, rec.reference).distance)
                           for h in rec.hypotheses])
        sims = np.array([query_similarity(h.words, rec.reference)
                         for h in rec.hypotheses])
        items.append(TrainItem(hyp_tokens=hyp_tokens,
                               target=vocab.encode(" ".join(rec.reference)),
                               word_errors=errors, similarities=sims))
    return items


def _fits(item: TrainItem, budget: int, max_len: int) -> bool:
    if item.token_count > budget:
        return False
    if len(item.target) - 1 > max_len:
        return False
    return all(len(t) <= max_len for t in item.hyp_tokens)


def _batch_items(items, budget: int, seed: int, max_len: int):
    """Shuffle, group by N, and pack greedily under the token budget."""
    rng = np.random.default_rng(seed)
    groups = {}
    skipped = 0
    for item in items:
        if _fits(item, budget, max_len):
            groups.setdefault(item.n, []).append(item)
        else:
            skipped += 1
    batches = []
    for n in sorted(groups):
        group = groups[n]
        order = rng.permutation(len(group))
        current, tokens = [], 0
        for idx in order:
            item = group[idx]
            if current and tokens + item.token_count > budget:
                batches.append(current)
                current, tokens = [], 0
            current.append(item)
            tokens += item.token_count
        if current:
            batches.append(current)
    return [batches[i] for i in rng.permutation(len(batches))], skipped


def make_batches(records, vocab, budget: int, seed: int, max_len: int = 512):
    """Batch stream over one shuffled pass: (batches, skipped record count)."""
    return _batch_items(prepare_items(records, vocab), budget, seed, max_len)


def _pad_matrix(token_lists, width=None):
    width = width or max(len(t) for t in token_lists)
    ids = np.full((len(token_lists), width), PAD, dtype=np.int64)
    for i, toks in enumerate(token_lists):
        ids[i, : len(toks)] = toks
    return ids


def batch_loss(params, model_cfg, batch, variant: str, weight: float,
               training=False, rng=None) -> losses.LossBreakdown:
    """Combined loss of one N-homogeneous batch.

    Cross-entropy teacher-forces the reference transcript; the auxiliary
    term is expected word error under the hypothesis posterior for the
    rescorer variant, or the score distribution cross-entropy for the
    rescore attention variant.
    """
    if not batch:
        raise UsageError("batch_loss: empty batch")
    n = batch[0].n
    if any(item.n != n for item in batch):
        raise UsageError("batch_loss: batch mixes different N-best sizes")
    b = len(batch)
    hyp_width = max(len(t) for item in batch for t in item.hyp_tokens)
    enc_ids = np.full((b, n, hyp_width), PAD, dtype=np.int64)
    for i, item in enumerate(batch):
        for j, toks in enumerate(item.hyp_tokens):
            enc_ids[i, j, : len(toks)] = toks
    h_w, hw_mask = model.encode_batch(enc_ids, enc_ids == PAD, params, model_cfg,
                                      training, rng)

    targets = _pad_matrix([item.target for item in batch])
    logps = model.teacher_logps_batch(h_w, hw_mask, targets, params, model_cfg,
                                      training, rng)
    ce = losses.ce_loss(logps, pad_mask=targets[:, 1:] == PAD)

    if variant == "TRA":
        # H_t embeds the reference without bos, mirroring a decoded sequence.
        t_ids = targets[:, 1:]
        h_t = model.embed_targets_batch(t_ids, params, model_cfg, training, rng)
        s_hat = model.rescore_attention_batch(h_w, hw_mask, h_t, t_ids == PAD, n,
                                              params, model_cfg, training, rng)
        aux = losses.mqsd_loss_rows(np.stack([i.similarities for i in batch]), s_hat)
    elif variant == "TR":
        hyp_targets = np.full((b, n, hyp_width), PAD, dtype=np.int64)
        for i, item in enumerate(batch):
            for j, toks in enumerate(item.hyp_tokens):
                hyp_targets[i, j, : len(toks)] = toks
        p = model.tr_posteriors_batch(h_w, hw_mask, hyp_targets, params, model_cfg,
                                      training, rng)
        aux = losses.mwer_loss_rows(p, np.stack([i.word_errors for i in batch]))
    else:
        raise ConfigurationError(f"batch_loss: unknown variant {variant!r}")
    return losses.combined(ce, aux, weight)


def evaluate_loss(params, model_cfg, items, variant: str, weight: float,
                  budget: int) -> float:
    """Record-weighted mean combined loss, dropout off, no gradients."""
    batches, _ = _batch_items(items, budget, seed=0, max_len=model_cfg.max_len)
    if not batches:
        raise ConfigurationError("evaluate_loss: no records fit the budget")
    total, count = 0.0, 0
    with T.no_grad():
        for batch in batches:
            lb = batch_loss(params, model_cfg, batch, variant, weight)
            total += float(lb.combined.values) * len(batch)
            count += len(batch)
    return total / count


def format_log_line(entry: dict) -> str:
    parts = []
    for key, value in entry.items():
        if isinstance(value, float):
            parts.append(f"{key}={value:.6f}")
        else:
            parts.append(f"{key}={value}")
    return " ".join(parts)


def train(variant: str, records, dev_records, model_cfg, cfg: TrainConfig,
          vocab, params=None) -> TrainResult:
    """Run the full loop; returns the best-dev parameters and the log.

    Deterministic given cfg.seed: batching reshuffles per epoch from derived
    seeds and one dropout stream feeds every step in order. Non-finite loss
    aborts immediately with the offending step in the message.
    """
    train_ids = {r.query_id for r in records if r.query_id}
    dev_ids = {r.query_id for r in dev_records if r.query_id}
    overlap = train_ids & dev_ids
    if overlap:
        raise ConfigurationError(
            f"train: dev split overlaps training data (e.g. {sorted(overlap)[0]!r})")

    items = prepare_items(records, vocab)
    dev_items = prepare_items(dev_records, vocab)
    if params is None:
        params = model.init_params(model_cfg, cfg.seed)
    adam = T.AdamState(params)
    rng = np.random.default_rng(cfg.seed + 1)
    stopper = EarlyStopper(cfg.patience)
    best_values = {k: p.values.copy() for k, p in params.items()}
    result = TrainResult(params=params)

    step = 0
    epoch = 0
    stop = False
    while not stop and step < cfg.max_steps:
        batches, skipped = _batch_items(items, cfg.batch_token_budget,
                                        cfg.seed + epoch, model_cfg.max_len)
        if epoch == 0:
            result.skipped = skipped
        if not batches:
            raise ConfigurationError("train: no records fit the token budget")
        for batch in batches:
            step += 1
            lr = T.lr_schedule(step, model_cfg.d_model, cfg.warmup)
            lb = batch_loss(params, model_cfg, batch, variant, cfg.aux_weight,
                            training=True, rng=rng)
            value = float(lb.combined.values)
            if not math.isfinite(value):
                raise UsageError(f"train: diverged at step {step}, loss={value}")
            lb.combined.backward()
            T.clip_grad_norm(params, cfg.clip_norm)
            T.adam_step(params, adam, lr)
            entry = {"step": step, "lr": lr, "loss": value,
                     "ce": lb.ce, "aux": lb.mwer_or_mqsd}
            if step % cfg.eval_every == 0 or step == cfg.max_steps:
                dev = evaluate_loss(params, model_cfg, dev_items, variant,
                                    cfg.aux_weight, cfg.batch_token_budget)
                entry["dev"] = dev
                stop = stopper.update(dev)
                if stopper.improved:
                    best_values = {k: p.values.copy() for k, p in params.items()}
            result.log.append(entry)
            if stop or step >= cfg.max_steps:
                break
        epoch += 1

    for key, values in best_values.items():
        params[key].values = values
    result.best_dev = stopper.best
    result.steps = step
    return result
