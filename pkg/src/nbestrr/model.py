"""Rescoring networks over N-best lists: shared encoder/decoder transformer,
hypothesis probability scoring for the rescorer variant, and the rescore
attention head that reads encoder states against the target embedding.

All sequence activations flow as (batch, length, d_model) tensors. The
context aggregator concatenates the N hypothesis embeddings along the
length axis; positional encodings restart at zero inside each hypothesis,
and no rank information is added, so hypothesis order only permutes the
per-hypothesis outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, InputError, UsageError
from .tokenizer import BOS, EOS, PAD

NEG_FILL = -1e30

KEEP_ASR = "keep_asr"
RESCORE = "rescore"
REWRITE = "rewrite"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 512
    heads: int = 8
    enc_layers: int = 4
    dec_layers: int = 1
    ff_dim: int = 2048
    max_len: int = 64
    nbest_max: int = 10
    dropout: float = 0.1
    variant: str = "TRA"

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "heads", "enc_layers",
                     "dec_layers", "ff_dim", "max_len", "nbest_max"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"ModelConfig: {name} must be >= 1")
        if self.d_model % self.heads != 0:
            raise ConfigurationError(
                f"ModelConfig: d_model {self.d_model} not divisible by heads {self.heads}")
        if self.max_len < 2:
            raise ConfigurationError("ModelConfig: max_len must be >= 2")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("ModelConfig: dropout outside [0, 1)")
        if self.variant not in ("TR", "TRA"):
            raise ConfigurationError(f"ModelConfig: unknown variant {self.variant!r}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads


@dataclass(frozen=True)
class DecodeResult:
    tokens: tuple
    token_logps: tuple
    mean_logp: float


@dataclass(frozen=True)
class RescoreOutput:
    scores: tuple


_POSENC_CACHE = {}


def sinusoidal_encoding(length: int, d_model: int) -> np.ndarray:
    """Fixed sin/cos position table of shape (length, d_model)."""
    key = (length, d_model)
    cached = _POSENC_CACHE.get(key)
    if cached is None:
        pos = np.arange(length, dtype=np.float64)[:, None]
        dim = np.arange(0, d_model, 2, dtype=np.float64)
        angle = pos / np.power(10000.0, dim / d_model)
        cached = np.zeros((length, d_model))
        cached[:, 0::2] = np.sin(angle)
        cached[:, 1::2] = np.cos(angle[:, : d_model - d_model // 2])
        _POSENC_CACHE[key] = cached
    return cached


def init_params(cfg: ModelConfig, seed: int = 0) -> dict:
    """Fresh parameter dictionary; rescore projections only for the TRA variant."""
    rng = np.random.default_rng(seed)
    d, ff, v = cfg.d_model, cfg.ff_dim, cfg.vocab_size
    # Embeddings start at std d^-0.5 so the sqrt(d) lookup scale makes them unit.
    params = {"embed.w": T.parameter(rng.normal(0.0, d ** -0.5, size=(v, d)))}

    def attn_block(prefix, with_output=True):
        names = ("wq", "wk", "wv", "wo") if with_output else ("wq", "wk", "wv")
        for n in names:
            params[f"{prefix}.{n}"] = T.parameter(T.xavier_uniform((d, d), rng))

    def ffn_block(prefix):
        params[f"{prefix}.w1"] = T.parameter(T.xavier_uniform((d, ff), rng))
        params[f"{prefix}.b1"] = T.parameter(np.zeros(ff))
        params[f"{prefix}.w2"] = T.parameter(T.xavier_uniform((ff, d), rng))
        params[f"{prefix}.b2"] = T.parameter(np.zeros(d))

    def ln_block(prefix):
        params[f"{prefix}.g"] = T.parameter(np.ones(d))
        params[f"{prefix}.b"] = T.parameter(np.zeros(d))

    for i in range(cfg.enc_layers):
        attn_block(f"enc.{i}.attn")
        ln_block(f"enc.{i}.ln1")
        ffn_block(f"enc.{i}.ffn")
        ln_block(f"enc.{i}.ln2")
    for i in range(cfg.dec_layers):
        attn_block(f"dec.{i}.self")
        ln_block(f"dec.{i}.ln1")
        attn_block(f"dec.{i}.cross")
        ln_block(f"dec.{i}.ln2")
        ffn_block(f"dec.{i}.ffn")
        ln_block(f"dec.{i}.ln3")
    params["out.w"] = T.parameter(T.xavier_uniform((d, v), rng))
    params["out.b"] = T.parameter(np.zeros(v))
    if cfg.variant == "TRA":
        attn_block("rescore", with_output=False)
    return params


def _embed(ids: np.ndarray, params, cfg, training=False, rng=None) -> T.Tensor:
    """Token embedding scaled by sqrt(d) plus positions restarting per row."""
    x = T.embedding_lookup(params["embed.w"], ids)
    x = T.scale(x, math.sqrt(cfg.d_model))
    pos = T.constant(sinusoidal_encoding(ids.shape[-1], cfg.d_model))
    x = T.add(x, pos)
    return T.dropout(x, cfg.dropout, training, rng)


def _split_heads(x: T.Tensor, cfg) -> T.Tensor:
    b, t, _ = x.values.shape
    x = T.reshape(x, (b, t, cfg.heads, cfg.head_dim))
    return T.transpose(x, (0, 2, 1, 3))


def _merge_heads(x: T.Tensor, cfg) -> T.Tensor:
    b, _, t, _ = x.values.shape
    x = T.transpose(x, (0, 2, 1, 3))
    return T.reshape(x, (b, t, cfg.d_model))


def _blockwise_context(scores, v, n, cfg, training, rng):
    """Attention context whose key reductions group by hypothesis block.

    The softmax denominator and the context sum both run over all N*l keys;
    computing them as per-block partials combined in ascending order makes
    the result depend only on the multiset of blocks, so reordering
    equal-length hypothesis blocks permutes the output bitwise exactly.
    """
    b, h, s, keys = scores.values.shape
    block = keys // n
    shift = T.constant(-scores.values.max(axis=-1, keepdims=True))
    e = T.reshape(T.exp(T.add(scores, shift)), (b, h, s, n, block))
    denom = T.sum_sorted(T.reduce_sum(e, axis=-1), axis=-1)
    att = T.divide(e, T.reshape(denom, (b, h, s, 1, 1)))
    att = T.dropout(att, cfg.dropout, training, rng)
    att = T.transpose(att, (0, 1, 3, 2, 4))
    v_blocks = T.reshape(v, (b, h, n, block, cfg.head_dim))
    parts = T.transpose(T.matmul(att, v_blocks), (0, 1, 3, 2, 4))
    return T.sum_sorted(parts, axis=3)


def _attention(params, prefix, q_in, kv_in, cfg, mask=None, training=False,
               rng=None, with_output=True, n_blocks=None):
    """Multi-head attention; mask is boolean, True marks blocked key positions.

    n_blocks switches the key reductions to the block-canonical form, used
    when the key sequence is N same-length hypothesis blocks whose order
    must not leak into the values.
    """
    q = _split_heads(T.matmul(q_in, params[f"{prefix}.wq"]), cfg)
    k = _split_heads(T.matmul(kv_in, params[f"{prefix}.wk"]), cfg)
    v = _split_heads(T.matmul(kv_in, params[f"{prefix}.wv"]), cfg)
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))),
                     1.0 / math.sqrt(cfg.head_dim))
    if mask is not None:
        scores = T.masked_fill(scores, mask, NEG_FILL)
    if n_blocks is None:
        att = T.softmax(scores, axis=-1)
        att = T.dropout(att, cfg.dropout, training, rng)
        ctx = T.matmul(att, v)
    else:
        ctx = _blockwise_context(scores, v, n_blocks, cfg, training, rng)
    ctx = _merge_heads(ctx, cfg)
    if with_output:
        ctx = T.matmul(ctx, params[f"{prefix}.wo"])
    return ctx


def _ffn(params, prefix, x, cfg, training=False, rng=None):
    h = T.relu(T.add(T.matmul(x, params[f"{prefix}.w1"]), params[f"{prefix}.b1"]))
    h = T.dropout(h, cfg.dropout, training, rng)
    return T.add(T.matmul(h, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])


def _layer_norm(params, prefix, x):
    return T.layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"])


def _residual(params, prefix, x, sub, cfg, training, rng):
    return _layer_norm(params, prefix, T.add(x, T.dropout(sub, cfg.dropout, training, rng)))


def aggregate_context(embedded, pad_masks=None):
    """Concatenate per-hypothesis embeddings (each l x d) along length.

    Row k of the output is row k mod l of hypothesis k // l. Returns the
    (N*l, d) tensor and the concatenated padding mask (None when no masks
    are given).
    """
    embedded = list(embedded)
    if not embedded:
        raise UsageError("aggregate_context: no hypotheses")
    shape = embedded[0].values.shape
    for e in embedded:
        if e.values.ndim != 2 or e.values.shape != shape:
            raise UsageError("aggregate_context: hypotheses must share one (l, d) shape")
    out = T.concat(embedded, axis=0)
    if pad_masks is None:
        return out, None
    return out, np.concatenate([np.asarray(m, dtype=bool) for m in pad_masks])


def pad_token_matrix(token_lists, max_len=None):
    """Stack variable-length id lists into a pad-filled int matrix plus mask."""
    if not token_lists:
        raise InputError("pad_token_matrix: empty token list")
    width = max(len(t) for t in token_lists)
    if max_len is not None and width > max_len:
        raise InputError(f"pad_token_matrix: length {width} exceeds max_len {max_len}")
    ids = np.full((len(token_lists), width), PAD, dtype=np.int64)
    for i, toks in enumerate(token_lists):
        ids[i, : len(toks)] = toks
    return ids, ids == PAD


def encode_batch(ids: np.ndarray, pad: np.ndarray, params, cfg, training=False,
                 rng=None):
    """Encoder over a batch of aggregated N-best lists.

    ids is (B, N, l) with the pad id filling short rows. Positions restart
    at zero for every hypothesis before the rows are joined into one
    (B, N*l, d) sequence; only padded key positions are masked, so attention
    crosses hypothesis boundaries freely. Returns the encoded tensor and the
    flattened (B, N*l) pad mask.
    """
    b, n, l = ids.shape
    if n < 1 or n > cfg.nbest_max:
        raise UsageError(f"encode: got {n} hypotheses, limit {cfg.nbest_max}")
    if l > cfg.max_len:
        raise InputError(f"encode: hypothesis length {l} exceeds max_len {cfg.max_len}")
    x = _embed(ids, params, cfg, training, rng)
    x = T.reshape(x, (b, n * l, cfg.d_model))
    mask = pad.reshape(b, n * l)
    key_mask = mask[:, None, None, :]
    for i in range(cfg.enc_layers):
        a = _attention(params, f"enc.{i}.attn", x, x, cfg, key_mask, training,
                       rng, n_blocks=n)
        x = _residual(params, f"enc.{i}.ln1", x, a, cfg, training, rng)
        f = _ffn(params, f"enc.{i}.ffn", x, cfg, training, rng)
        x = _residual(params, f"enc.{i}.ln2", x, f, cfg, training, rng)
    return x, mask


def encode(hyp_tokens, params, cfg, training=False, rng=None):
    """Run one aggregated N-best list through the encoder stack.

    hyp_tokens: N token-id lists, each starting with bos and ending with
    eos. Returns (H_w of shape (N*l, d), flat padding mask of shape (N*l,)).
    """
    ids, pad = pad_token_matrix(hyp_tokens, cfg.max_len)
    x, mask = encode_batch(ids[None], pad[None], params, cfg, training, rng)
    l_n = ids.shape[0] * ids.shape[1]
    return T.reshape(x, (l_n, cfg.d_model)), mask[0]


def _lift(h_w, hw_mask):
    """Accept per-record (S, d) or batched (B, S, d) encoder states."""
    if h_w.values.ndim == 2:
        h_w = T.reshape(h_w, (1,) + h_w.values.shape)
    mask = np.asarray(hw_mask, dtype=bool)
    if mask.ndim == 1:
        mask = mask[None]
    return h_w, mask


def _decoder_logprobs(h_w, hw_mask, dec_in, params, cfg, training=False, rng=None):
    """Log-softmax token distributions for each decoder input position."""
    b, t = dec_in.shape
    x = _embed(dec_in, params, cfg, training, rng)
    causal = np.triu(np.ones((t, t), dtype=bool), k=1)
    self_mask = causal[None, None] | (dec_in == PAD)[:, None, None, :]
    h3, mask = _lift(h_w, hw_mask)
    cross_mask = mask[:, None, None, :]
    for i in range(cfg.dec_layers):
        a = _attention(params, f"dec.{i}.self", x, x, cfg, self_mask, training, rng)
        x = _residual(params, f"dec.{i}.ln1", x, a, cfg, training, rng)
        c = _attention(params, f"dec.{i}.cross", x, h3, cfg, cross_mask, training, rng)
        x = _residual(params, f"dec.{i}.ln2", x, c, cfg, training, rng)
        f = _ffn(params, f"dec.{i}.ffn", x, cfg, training, rng)
        x = _residual(params, f"dec.{i}.ln3", x, f, cfg, training, rng)
    logits = T.add(T.matmul(x, params["out.w"]), params["out.b"])
    return T.log_softmax(logits, axis=-1)


def _gather_target_logps(h_w, hw_mask, targets, params, cfg, training=False, rng=None):
    """Shift-right teacher forcing over a padded (B, T) target matrix.

    Returns the (B, T-1) log-probabilities of targets[:, 1:]; padded slots
    carry junk and must be masked by the caller.
    """
    logs = _decoder_logprobs(h_w, hw_mask, targets[:, :-1], params, cfg, training, rng)
    return T.gather_last(logs, targets[:, 1:])


def teacher_logps_batch(h_w, hw_mask, targets: np.ndarray, params, cfg,
                        training=False, rng=None) -> T.Tensor:
    """Teacher forcing over padded (B, T) targets; see _gather_target_logps."""
    return _gather_target_logps(h_w, hw_mask, targets, params, cfg, training, rng)


def embed_targets_batch(ids: np.ndarray, params, cfg, training=False, rng=None) -> T.Tensor:
    """Target-side embeddings H_t for a padded (B, T) id matrix: (B, T, d)."""
    return _embed(ids, params, cfg, training, rng)


def teacher_force_logps(h_w, hw_mask, target, params, cfg, training=False, rng=None):
    """Per-token log-probabilities of one target sequence under the decoder.

    target must begin with bos and end with eos; the returned tensor has one
    entry per target token after bos.
    """
    target = list(target)
    if len(target) < 2 or target[0] != BOS or target[-1] != EOS:
        raise InputError("teacher_force_logps: target must run from bos to eos")
    if len(target) - 1 > cfg.max_len:
        raise InputError(f"teacher_force_logps: target length {len(target)} "
                         f"exceeds max_len {cfg.max_len}")
    ids = np.asarray([target], dtype=np.int64)
    logps = _gather_target_logps(h_w, hw_mask, ids, params, cfg, training, rng)
    return T.reshape(logps, (len(target) - 1,))


def decode_greedy(h_w, hw_mask, params, cfg) -> DecodeResult:
    """Greedy argmax decoding from bos until eos or the length limit.

    The returned token_logps come from one final teacher-forced pass over
    the chosen tokens, so feeding the result back through
    teacher_force_logps reproduces them exactly.
    """
    with T.no_grad():
        ids = [BOS]
        for _ in range(cfg.max_len - 1):
            logs = _decoder_logprobs(h_w, hw_mask, np.asarray([ids], dtype=np.int64),
                                     params, cfg)
            nxt = int(np.argmax(logs.values[0, -1]))
            ids.append(nxt)
            if nxt == EOS:
                break
        # Rescore the chosen sequence in one pass: input ids[:-1], predict ids[1:].
        logs = _decoder_logprobs(h_w, hw_mask, np.asarray([ids[:-1]], dtype=np.int64),
                                 params, cfg)
        picked = logs.values[0, np.arange(len(ids) - 1), ids[1:]]
    tokens = tuple(ids[1:])
    token_logps = tuple(float(x) for x in picked)
    return DecodeResult(tokens=tokens, token_logps=token_logps,
                        mean_logp=float(np.mean(picked)))


def tr_posteriors_batch(h_w, hw_mask, hyp_targets: np.ndarray, params, cfg,
                        training=False, rng=None) -> T.Tensor:
    """Normalized hypothesis probabilities over batched (B, N, T) targets.

    Every hypothesis is teacher-forced as its own target against its
    record's shared encoder output; sigmoid of the mean token
    log-probability gives an unnormalized confidence, renormalized over the
    record to sum to one. Returns a (B, N) tensor.
    """
    b, n, t = hyp_targets.shape
    h3, mask = _lift(h_w, hw_mask)
    h_rep = T.repeat_interleave(h3, n, axis=0)
    mask_rep = np.repeat(mask, n, axis=0)
    flat = hyp_targets.reshape(b * n, t)
    logps = _gather_target_logps(h_rep, mask_rep, flat, params, cfg, training, rng)
    live = (flat[:, 1:] != PAD).astype(np.float64)
    summed = T.reduce_sum(T.mul(logps, T.constant(live)), axis=-1)
    mean = T.divide(summed, T.constant(live.sum(axis=-1)))
    q = T.sigmoid(T.reshape(mean, (b, n)))
    return T.divide(q, T.reduce_sum(q, axis=-1, keepdims=True))


def score_nbest_tr(hyp_tokens, params, cfg, training=False, rng=None) -> T.Tensor:
    """Normalized hypothesis probabilities p(y_i | x) for one record."""
    if not hyp_tokens:
        raise InputError("score_nbest_tr: empty record")
    h_w, hw_mask = encode(hyp_tokens, params, cfg, training, rng)
    targets, _ = pad_token_matrix(hyp_tokens, cfg.max_len + 1)
    p = tr_posteriors_batch(h_w, hw_mask, targets[None], params, cfg, training, rng)
    return T.reshape(p, (len(hyp_tokens),))


def embed_target(tokens, params, cfg, training=False, rng=None) -> T.Tensor:
    """Target-side embedding H_t for the rescore head: (len(tokens), d)."""
    tokens = list(tokens)
    if not tokens:
        raise InputError("embed_target: empty target")
    ids = np.asarray([tokens], dtype=np.int64)
    x = _embed(ids, params, cfg, training, rng)
    return T.reshape(x, (len(tokens), cfg.d_model))


def rescore_attention_batch(h_w, hw_mask, h_t, t_mask, n: int, params, cfg,
                            training=False, rng=None) -> T.Tensor:
    """Batched rescore head: (B, l_N, d) queries against (B, l_t, d) targets.

    Multi-head attention (no output projection) with queries from h_w and
    keys/values from h_t is partitioned into the N equal-length blocks of
    each aggregated sequence; pad positions are dropped from both block and
    target reduce-sums. Each block sum is dotted with the target sum and
    scaled by 1/sqrt(d * l_t * l) to keep the sigmoid responsive; the scale
    is uniform over one record's hypotheses, so their ranking is unchanged.
    Returns sigmoid scores of shape (B, N), each in (0, 1).
    """
    h3, hw_pad = _lift(h_w, hw_mask)
    t3, t_pad = _lift(h_t, t_mask)
    b, l_n, d = h3.values.shape
    l_t = t3.values.shape[1]
    if n < 1 or l_n % n != 0:
        raise UsageError(f"rescore_attention: length {l_n} not divisible by N={n}")
    block = l_n // n
    att = _attention(params, "rescore", h3, t3, cfg, t_pad[:, None, None, :],
                     training=training, rng=rng, with_output=False)
    hyp_live = (~hw_pad).astype(np.float64)
    att = T.mul(att, T.constant(hyp_live[:, :, None]))
    blocks = T.reduce_sum(T.reshape(att, (b, n, block, d)), axis=2)     # (B, N, d)
    t_live = (~t_pad).astype(np.float64)
    target_sum = T.reduce_sum(T.mul(t3, T.constant(t_live[:, :, None])), axis=1)
    # Dot each block sum with the target sum via an elementwise product and
    # a per-row reduction; a matrix-vector product here rounds differently
    # depending on the row's position, breaking exact permutation symmetry.
    prods = T.mul(blocks, T.reshape(target_sum, (b, 1, d)))
    lengths = np.sqrt(d * block * t_live.sum(axis=1))                   # (B,)
    dots = T.divide(T.reduce_sum(prods, axis=-1), T.constant(lengths[:, None]))
    return T.sigmoid(dots)


def rescore_attention(h_w, h_t, params, cfg, n, pad_mask=None, training=False,
                      rng=None) -> T.Tensor:
    """Per-hypothesis rescore scores for one record; returns shape (N,)."""
    l_n = h_w.values.shape[0]
    l_t = h_t.values.shape[0]
    hw_mask = np.zeros(l_n, dtype=bool) if pad_mask is None else pad_mask
    s = rescore_attention_batch(h_w, hw_mask, h_t, np.zeros(l_t, dtype=bool),
                                n, params, cfg, training, rng)
    return T.reshape(s, (n,))


def score_nbest_tra(hyp_tokens, target_tokens, params, cfg) -> RescoreOutput:
    """Inference-time rescore scores for an N-best list against a target."""
    if cfg.variant != "TRA":
        raise UsageError("score_nbest_tra: model variant lacks rescore projections")
    with T.no_grad():
        h_w, hw_mask = encode(hyp_tokens, params, cfg)
        h_t = embed_target(target_tokens, params, cfg)
        s = rescore_attention(h_w, h_t, params, cfg, len(hyp_tokens), hw_mask)
    return RescoreOutput(scores=tuple(float(x) for x in s.values))


def rewrite_decide(decode: DecodeResult, scores, record, threshold_r, threshold_w,
                   decoded_words=None):
    """Choose the final 1-best: keep ASR order, re-rank by score, or rewrite.

    Confidence below threshold_r keeps the ASR 1-best; above it the highest
    rescore wins; above threshold_w as well (and with more than one
    hypothesis) the decoded text replaces the list entirely.
    """
    if threshold_w < threshold_r:
        raise UsageError("rewrite_decide: threshold_w must not be below threshold_r")
    hyps = record.hypotheses
    if decode.mean_logp <= threshold_r:
        return KEEP_ASR, hyps[0].words
    values = scores.scores if isinstance(scores, RescoreOutput) else scores
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (len(hyps),):
        raise UsageError("rewrite_decide: one score per hypothesis required")
    if decode.mean_logp > threshold_w and len(hyps) > 1:
        if decoded_words is None:
            raise UsageError("rewrite_decide: rewrite chosen but no decoded words given")
        return REWRITE, tuple(decoded_words)
    return RESCORE, hyps[int(np.argmax(values))].words


def save_config(cfg: ModelConfig, path):
    with open(path, "w", encoding="utf-8") as f:
        for key, value in sorted(vars(cfg).items()):
            f.write(f"{key}={value}\n")


def load_config(path) -> ModelConfig:
    kwargs = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            if key == "variant":
                kwargs[key] = value
            elif key == "dropout":
                kwargs[key] = float(value)
            else:
                kwargs[key] = int(value)
    return ModelConfig(**kwargs)
