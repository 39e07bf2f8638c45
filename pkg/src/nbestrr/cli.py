"""Command-line pipeline surface.

Six subcommands cover the full workflow: synth (templates + error channel
to N-best JSONL), tokenize (BPE vocabulary), train (transformer variants or
the back-off n-gram baseline), score (per-hypothesis rescorer outputs plus
greedy decodes), tune (decision thresholds and interpolation weights on a
dev set), and eval (the WER table with relative changes against the ASR
1-best row, plus a TSV copy).

Every command resolves one key=value config (defaults, then --config file,
then --set overrides, then --seed), derives all randomness from the root
seed, and writes a manifest naming the config digest and every input and
output path. Reruns with the same manifest produce byte-identical outputs.
Exit codes: 0 ok, 1 input error, 2 internal error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import re
import sys
from dataclasses import dataclass

import numpy as np

from . import __version__, corpus, interpolate, metrics, model, ngram, trainer
from . import tensor as T
from .errors import ConfigurationError, InputError, ParseError
from .tokenizer import Vocabulary, train_bpe

LN10 = math.log(10.0)

_SLOT_RE = re.compile(r"\{([^{}]+)\}")

CONFIG_DEFAULTS = {
    "seed": "0",
    # synth: query sources, split sizes, error channel
    "domains": "media:0.8,open:0.2",
    "catalog": "",
    "train_count": "5000",
    "dev_count": "500",
    "eval_count": "500",
    "nbest_size": "5",
    "p_sub": "0.12",
    "p_del": "0.03",
    "p_ins": "0.03",
    "noise_scale": "3.0",
    "confusion_size": "6",
    "firstpass_lm_order": "2",
    # tokenizer
    "vocab_budget": "300",
    # model
    "d_model": "64",
    "heads": "4",
    "enc_layers": "2",
    "dec_layers": "1",
    "ff_dim": "128",
    "max_len": "48",
    "dropout": "0.1",
    # trainer
    "max_steps": "3000",
    "eval_every": "150",
    "batch_token_budget": "1500",
    "warmup": "300",
    "patience": "5",
    "aux_weight": "0.01",
    "clip_norm": "1.0",
    # n-gram baseline
    "ngram_order": "4",
    # tuning
    "in_domain": "media",
    "r_grid": "-3.0:0.0:0.1",
    "w_grid": "-3.0:0.0:0.1",
}


# ---------------------------------------------------------------------------
# config and manifest plumbing

def _check_key(key: str):
    if key not in CONFIG_DEFAULTS and not key.startswith("templates_"):
        raise ConfigurationError(f"unknown config key {key!r}")


def read_config_file(path) -> dict:
    data = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ParseError(f"{path}:{lineno}: expected key=value")
            data[key.strip()] = value.strip()
    return data


def resolve_config(args) -> dict:
    """Defaults, then the --config file, then --set pairs, then --seed."""
    cfg = dict(CONFIG_DEFAULTS)
    if getattr(args, "config", None):
        for key, value in read_config_file(args.config).items():
            _check_key(key)
            cfg[key] = value
    for pair in getattr(args, "set", None) or []:
        key, sep, value = pair.partition("=")
        if not sep:
            raise InputError(f"--set {pair!r}: expected key=value")
        _check_key(key.strip())
        cfg[key.strip()] = value.strip()
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = str(args.seed)
    return cfg


def cfg_int(cfg, key) -> int:
    try:
        return int(cfg[key])
    except ValueError as exc:
        raise ConfigurationError(f"config key {key}={cfg[key]!r} is not an integer") from exc


def cfg_float(cfg, key) -> float:
    try:
        return float(cfg[key])
    except ValueError as exc:
        raise ConfigurationError(f"config key {key}={cfg[key]!r} is not a number") from exc


def parse_grid(text) -> list:
    """Grid spec: either "start:stop:step" (inclusive) or "v1,v2,...". """
    text = text.strip()
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ConfigurationError(f"grid {text!r}: expected start:stop:step")
        start, stop, step = (float(p) for p in parts)
        if step <= 0 or stop < start:
            raise ConfigurationError(f"grid {text!r}: needs step > 0 and stop >= start")
        n = int(math.floor((stop - start) / step + 1e-9)) + 1
        return [start + i * step for i in range(n)]
    values = [float(p) for p in text.split(",") if p.strip()]
    if not values:
        raise ConfigurationError(f"grid {text!r}: no values")
    return values


def config_digest(cfg) -> str:
    text = "\n".join(f"{k}={cfg[k]}" for k in sorted(cfg))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]


def write_manifest(path, command, cfg, inputs, outputs):
    lines = [f"command={command}",
             f"version={__version__}",
             f"config_digest={config_digest(cfg)}",
             f"seed={cfg['seed']}"]
    lines += [f"input.{k}={inputs[k]}" for k in sorted(inputs)]
    lines += [f"output.{k}={outputs[k]}" for k in sorted(outputs)]
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# scored-record files: rescorer outputs plus the greedy decode, per record

@dataclass(frozen=True)
class ScoredRow:
    words: tuple
    acoustic_logp: float
    firstpass_lm_logp: float
    score: float


@dataclass
class ScoredRecord:
    query_id: str
    domain: str
    reference: tuple
    rows: list
    decoded_words: tuple
    mean_logp: float
    decoded_logp: float


def domain_of(query_id: str) -> str:
    """Ids are {domain}-{split}-{index}; the prefix names the domain."""
    return query_id.partition("-")[0]


def write_scored(records, path):
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            obj = {"id": rec.query_id, "domain": rec.domain,
                   "ref": " ".join(rec.reference),
                   "rows": [{"text": " ".join(r.words), "am": r.acoustic_logp,
                             "lm": r.firstpass_lm_logp, "score": r.score}
                            for r in rec.rows],
                   "decoded": " ".join(rec.decoded_words),
                   "mean_logp": rec.mean_logp,
                   "decoded_logp": rec.decoded_logp}
            f.write(json.dumps(obj) + "\n")


def read_scored(path) -> list:
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                rows = [ScoredRow(words=tuple(r["text"].split()),
                                  acoustic_logp=float(r["am"]),
                                  firstpass_lm_logp=float(r["lm"]),
                                  score=float(r["score"]))
                        for r in obj["rows"]]
                rec = ScoredRecord(query_id=obj["id"], domain=obj["domain"],
                                   reference=tuple(obj["ref"].split()), rows=rows,
                                   decoded_words=tuple(obj["decoded"].split()),
                                   mean_logp=float(obj["mean_logp"]),
                                   decoded_logp=float(obj["decoded_logp"]))
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"{path}:{lineno}: malformed scored record ({exc})") from exc
            if not rec.rows:
                raise ParseError(f"{path}:{lineno}: scored record has no rows")
            records.append(rec)
    return records


# ---------------------------------------------------------------------------
# synth

def _read_templates(path) -> list:
    templates = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            slots = tuple(dict.fromkeys(_SLOT_RE.findall(line)))
            templates.append(corpus.QueryTemplate(pattern=line, slot_names=slots))
    if not templates:
        raise ConfigurationError(f"{path}: no templates")
    return templates


def _read_catalog(path) -> dict:
    try:
        with open(path, encoding="utf-8") as f:
            obj = json.load(f)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(obj, dict):
        raise ParseError(f"{path}: catalog must map slot names to value lists")
    catalog = {}
    for slot, values in obj.items():
        if not isinstance(values, list) or not all(isinstance(v, str) for v in values):
            raise ParseError(f"{path}: slot {slot!r} must list strings")
        catalog[slot] = [v.lower() for v in values]
    return catalog


def _parse_domains(text) -> list:
    """Parse "name:weight,name:weight" into normalized (name, share) pairs."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        name, sep, weight = part.partition(":")
        name = name.strip()
        w = float(weight) if sep else 1.0
        if not name or "-" in name:
            raise ConfigurationError(
                f"domain {name!r} must be non-empty and free of '-' (ids are domain-split-index)")
        if w <= 0:
            raise ConfigurationError(f"domain {name!r} has non-positive weight")
        out.append((name, w))
    if not out:
        raise ConfigurationError("domains: none given")
    total = sum(w for _, w in out)
    return [(n, w / total) for n, w in out]


def _allocate(count, shares) -> list:
    """Integer counts per share via largest remainders; sums to count."""
    exact = [count * s for s in shares]
    base = [int(x) for x in exact]
    order = sorted(range(len(shares)), key=lambda i: (-(exact[i] - base[i]), i))
    for i in order[: count - sum(base)]:
        base[i] += 1
    return base


def cmd_synth(args, cfg):
    domains = _parse_domains(cfg["domains"])
    if not cfg["catalog"]:
        raise ConfigurationError("synth: config key 'catalog' is required")
    catalog = _read_catalog(cfg["catalog"])
    templates = {}
    for name, _ in domains:
        key = f"templates_{name}"
        if key not in cfg:
            raise ConfigurationError(f"synth: config key '{key}' is required")
        templates[name] = _read_templates(cfg[key])

    pool = set()
    slot_words = {}
    for slot, values in catalog.items():
        words = set()
        for v in values:
            words.update(v.split())
        slot_words[slot] = words
        pool.update(words)
    for tmpls in templates.values():
        for t in tmpls:
            pool.update(_SLOT_RE.sub(" ", t.pattern).lower().split())
    pool = sorted(pool)

    def ring(words, w, count):
        words = sorted(words)
        if w not in words or len(words) < 2 or count < 1:
            return []
        i = words.index(w)
        out = []
        for d in range(1, len(words)):
            for j in (i - d, i + d):
                v = words[j % len(words)]
                if v != w and v not in out:
                    out.append(v)
            if len(out) >= count:
                break
        return out[:count]

    # Half of each word's confusables come from its own catalog slots, so
    # those substitutions stay plausible in context the way real recognizer
    # errors do; the rest come from the global pool, where language evidence
    # can catch them. Sets stay small so the substitution likelihood penalty
    # is comparable to the score jitter and errors can outrank clean text.
    size = cfg_int(cfg, "confusion_size")
    confusion = {}
    for w in pool:
        slot_pool = set()
        for words in slot_words.values():
            if w in words:
                slot_pool.update(words)
        near = ring(slot_pool, w, size - size // 2) if slot_pool else []
        for v in ring(pool, w, size):
            if len(near) >= size:
                break
            if v not in near:
                near.append(v)
        confusion[w] = near

    seed = cfg_int(cfg, "seed")
    nbest = cfg_int(cfg, "nbest_size")
    channel = corpus.ErrorChannelConfig(
        p_sub=cfg_float(cfg, "p_sub"), p_del=cfg_float(cfg, "p_del"),
        p_ins=cfg_float(cfg, "p_ins"), confusion_map=confusion,
        nbest_size_max=nbest, noise_scale=cfg_float(cfg, "noise_scale"), seed=seed)

    os.makedirs(args.out, exist_ok=True)
    splits = {}
    for split_idx, split in enumerate(("train", "dev", "eval")):
        count = cfg_int(cfg, f"{split}_count")
        alloc = _allocate(count, [s for _, s in domains])
        records = []
        for d_idx, (name, _) in enumerate(domains):
            queries = corpus.generate_queries(templates[name], catalog, alloc[d_idx],
                                              [seed + split_idx, d_idx])
            for i, query in enumerate(queries):
                rec = corpus.corrupt(query, channel, nbest)
                records.append(corpus.NBestRecord(f"{name}-{split}-{i:06d}",
                                                  rec.reference, rec.hypotheses))
        splits[split] = records

    lm_order = cfg_int(cfg, "firstpass_lm_order")
    if lm_order > 0:
        lm = ngram.train([list(r.reference) for r in splits["train"]], order=lm_order)
        splits = {s: corpus.attach_lm_scores(rs, lambda w: ngram.logprob(lm, list(w)) * LN10)
                  for s, rs in splits.items()}

    outputs = {}
    for split, records in splits.items():
        path = os.path.join(args.out, f"{split}.jsonl")
        corpus.emit_jsonl(records, path)
        outputs[split] = path
        asr = metrics.corpus_wer([(r.hypotheses[0].words, r.reference) for r in records])
        oracle = metrics.oracle_corpus_wer(records)
        print(f"{split}: {len(records)} records, 1-best WER {asr * 100:.2f}%, "
              f"oracle {oracle * 100:.2f}% -> {path}")
    inputs = {"catalog": cfg["catalog"]}
    inputs.update({f"templates_{n}": cfg[f"templates_{n}"] for n, _ in domains})
    write_manifest(os.path.join(args.out, "manifest.txt"), "synth", cfg, inputs, outputs)


# ---------------------------------------------------------------------------
# tokenize / train

def cmd_tokenize(args, cfg):
    records = corpus.read_jsonl(args.records)
    vocab = train_bpe([" ".join(r.reference) for r in records],
                      cfg_int(cfg, "vocab_budget"))
    vocab.save(args.out)
    write_manifest(args.out + ".manifest", "tokenize", cfg,
                   {"records": args.records}, {"vocab": args.out})
    print(f"vocabulary: {vocab.size} tokens, {len(vocab.merges)} merges -> {args.out}")


def cmd_train(args, cfg):
    records = corpus.read_jsonl(args.records)
    if not records:
        raise InputError(f"train: no records in {args.records}")
    os.makedirs(args.out, exist_ok=True)
    seed = cfg_int(cfg, "seed")

    if args.variant == "ngram":
        order = cfg_int(cfg, "ngram_order")
        lm = ngram.train([list(r.reference) for r in records], order=order)
        path = os.path.join(args.out, "ngram.arpa")
        ngram.export_arpa(lm, path)
        write_manifest(os.path.join(args.out, "manifest.txt"), "train", cfg,
                       {"records": args.records}, {"arpa": path})
        print(f"trained {order}-gram on {len(records)} references -> {path}")
        return

    if not args.dev or not args.vocab:
        raise InputError("train: --dev and --vocab are required for transformer variants")
    dev_records = corpus.read_jsonl(args.dev)
    vocab = Vocabulary.load(args.vocab)
    mcfg = model.ModelConfig(
        vocab_size=vocab.size, d_model=cfg_int(cfg, "d_model"),
        heads=cfg_int(cfg, "heads"), enc_layers=cfg_int(cfg, "enc_layers"),
        dec_layers=cfg_int(cfg, "dec_layers"), ff_dim=cfg_int(cfg, "ff_dim"),
        max_len=cfg_int(cfg, "max_len"), nbest_max=cfg_int(cfg, "nbest_size"),
        dropout=cfg_float(cfg, "dropout"), variant=args.variant)
    tcfg = trainer.TrainConfig(
        max_steps=cfg_int(cfg, "max_steps"), eval_every=cfg_int(cfg, "eval_every"),
        batch_token_budget=cfg_int(cfg, "batch_token_budget"),
        warmup=cfg_int(cfg, "warmup"), patience=cfg_int(cfg, "patience"),
        seed=seed, aux_weight=cfg_float(cfg, "aux_weight"),
        clip_norm=cfg_float(cfg, "clip_norm"))
    result = trainer.train(args.variant, records, dev_records, mcfg, tcfg, vocab)

    params_path = os.path.join(args.out, "params.npz")
    config_path = os.path.join(args.out, "model.txt")
    log_path = os.path.join(args.out, "log.txt")
    T.save_checkpoint(params_path, result.params)
    model.save_config(mcfg, config_path)
    with open(log_path, "w", encoding="utf-8") as f:
        for entry in result.log:
            f.write(trainer.format_log_line(entry) + "\n")
    write_manifest(os.path.join(args.out, "manifest.txt"), "train", cfg,
                   {"records": args.records, "dev": args.dev, "vocab": args.vocab},
                   {"params": params_path, "model": config_path, "log": log_path})
    print(f"trained {args.variant}: {result.steps} steps, best dev loss "
          f"{result.best_dev:.6f}, {result.skipped} records skipped -> {args.out}")


# ---------------------------------------------------------------------------
# score

def cmd_score(args, cfg):
    records = corpus.read_jsonl(args.records)
    if not records:
        raise InputError(f"score: no records in {args.records}")
    scored = []
    if args.rescorer == "ngram":
        lm = ngram.import_arpa(args.model)
        for rec in records:
            rows = [ScoredRow(h.words, h.acoustic_logp, h.firstpass_lm_logp,
                              ngram.logprob(lm, list(h.words)))
                    for h in rec.hypotheses]
            scored.append(ScoredRecord(rec.query_id, domain_of(rec.query_id),
                                       rec.reference, rows, (), 0.0, 0.0))
    else:
        if not args.vocab:
            raise InputError("score: --vocab is required for transformer rescorers")
        mcfg = model.load_config(os.path.join(args.model, "model.txt"))
        if args.rescorer == "tra" and mcfg.variant != "TRA":
            raise InputError("score: model checkpoint lacks rescore projections")
        params = {k: T.parameter(v)
                  for k, v in T.load_checkpoint(os.path.join(args.model, "params.npz")).items()}
        vocab = Vocabulary.load(args.vocab)
        for rec in records:
            hyp_tokens = [vocab.encode(" ".join(h.words)) for h in rec.hypotheses]
            decoded, mean_logp, decoded_logp = (), 0.0, 0.0
            with T.no_grad():
                if args.rescorer == "tra":
                    h_w, hw_mask = model.encode(hyp_tokens, params, mcfg)
                    dec = model.decode_greedy(h_w, hw_mask, params, mcfg)
                    h_t = model.embed_target(list(dec.tokens), params, mcfg)
                    s = model.rescore_attention(h_w, h_t, params, mcfg,
                                                len(hyp_tokens), hw_mask)
                    values = [float(x) for x in s.values]
                    decoded = tuple(vocab.decode(dec.tokens).split())
                    mean_logp = dec.mean_logp
                    decoded_logp = float(sum(dec.token_logps))
                else:
                    p = model.score_nbest_tr(hyp_tokens, params, mcfg)
                    values = [float(x) for x in p.values]
            rows = [ScoredRow(h.words, h.acoustic_logp, h.firstpass_lm_logp, v)
                    for h, v in zip(rec.hypotheses, values)]
            scored.append(ScoredRecord(rec.query_id, domain_of(rec.query_id),
                                       rec.reference, rows, decoded, mean_logp,
                                       decoded_logp))
    write_scored(scored, args.out)
    write_manifest(args.out + ".manifest", "score", cfg,
                   {"records": args.records, "model": args.model},
                   {"scored": args.out})
    print(f"scored {len(scored)} records with {args.rescorer} -> {args.out}")


# ---------------------------------------------------------------------------
# tune / eval

def _log_clip(x: float) -> float:
    # Scores are sigmoid/softmax outputs; the clip only guards exact underflow.
    return math.log(max(float(x), 1e-300))


def _decision_record(sr: ScoredRecord) -> interpolate.DecisionRecord:
    rec = corpus.NBestRecord(sr.query_id, sr.reference,
                             [corpus.Hypothesis(r.words, r.acoustic_logp,
                                                r.firstpass_lm_logp) for r in sr.rows])
    return interpolate.DecisionRecord(record=rec, scores=tuple(r.score for r in sr.rows),
                                      mean_logp=sr.mean_logp,
                                      decoded_words=sr.decoded_words, domain=sr.domain)


def _tra_decision(sr: ScoredRecord, threshold_r, threshold_w):
    dr = _decision_record(sr)
    stub = model.DecodeResult(tokens=(), token_logps=(), mean_logp=sr.mean_logp)
    return model.rewrite_decide(stub, dr.scores, dr.record, threshold_r, threshold_w,
                                sr.decoded_words)


def _tra_candidate_rows(sr: ScoredRecord, with_rewrite: bool) -> list:
    rows = [interpolate.CandidateRow(
        r.words, interpolate.SignalVector(r.acoustic_logp, r.firstpass_lm_logp,
                                          _log_clip(r.score), 0.0))
        for r in sr.rows]
    if with_rewrite:
        rows.append(interpolate.make_rewrite_row(sr.decoded_words, sr.decoded_logp))
    return rows


def _ngram_signal_records(records) -> list:
    # The n-gram rescorer scores in log10; other signals are natural logs.
    return [interpolate.SignalRecord(
        sr.query_id, sr.reference,
        [interpolate.CandidateRow(r.words,
                                  interpolate.SignalVector(r.acoustic_logp,
                                                           r.firstpass_lm_logp,
                                                           r.score * LN10, 0.0))
         for r in sr.rows],
        sr.domain) for sr in records]


def _save_thresholds(th: interpolate.ThresholdResult, path):
    with open(path, "w", encoding="utf-8") as f:
        for key in ("threshold_r", "threshold_w", "feasible", "in_wer", "all_wer"):
            f.write(f"{key}={getattr(th, key)!r}\n")


def _load_thresholds(path) -> interpolate.ThresholdResult:
    values = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ParseError(f"{path}:{lineno}: expected key=value")
            values[key] = value
    try:
        return interpolate.ThresholdResult(
            threshold_r=float(values["threshold_r"]),
            threshold_w=float(values["threshold_w"]),
            feasible=values["feasible"] == "True",
            in_wer=float(values["in_wer"]), all_wer=float(values["all_wer"]))
    except (KeyError, ValueError) as exc:
        raise ParseError(f"{path}: malformed thresholds file ({exc})") from exc


def _format_weights(w: interpolate.WeightVector) -> str:
    return " ".join(f"{name}={getattr(w, name):.4f}" for name in interpolate.SIGNAL_NAMES)


def cmd_tune(args, cfg):
    tra_records = read_scored(args.tra_scored)
    if not tra_records:
        raise InputError(f"tune: no records in {args.tra_scored}")
    in_domain = cfg["in_domain"]
    decisions = [_decision_record(sr) for sr in tra_records]
    dev_in = [d for d in decisions if d.domain == in_domain]
    if not dev_in:
        raise InputError(f"tune: no dev records in domain {in_domain!r}")
    th = interpolate.grid_search_thresholds(dev_in, decisions,
                                            parse_grid(cfg["r_grid"]),
                                            parse_grid(cfg["w_grid"]))
    os.makedirs(args.out, exist_ok=True)
    thresholds_path = os.path.join(args.out, "thresholds.txt")
    _save_thresholds(th, thresholds_path)
    print(f"thresholds: R={th.threshold_r} W={th.threshold_w} feasible={th.feasible} "
          f"(dev in-domain WER {th.in_wer * 100:.2f}%, all {th.all_wer * 100:.2f}%)")

    inputs = {"tra_scored": args.tra_scored}
    outputs = {"thresholds": thresholds_path}

    if args.ngram_scored:
        ngram_records = read_scored(args.ngram_scored)
        w4 = interpolate.tune_weights(_ngram_signal_records(ngram_records))
        path = os.path.join(args.out, "weights_4gram.txt")
        interpolate.save_weights(w4, path)
        inputs["ngram_scored"] = args.ngram_scored
        outputs["weights_4gram"] = path
        print(f"weights_4gram: {_format_weights(w4)}")

    # Records the thresholds keep untouched contribute nothing tunable; the
    # weights are fit on the rescored remainder, rewrite candidates included.
    signal_records = []
    for sr in tra_records:
        decision, _ = _tra_decision(sr, th.threshold_r, th.threshold_w)
        if decision == model.KEEP_ASR:
            continue
        signal_records.append(interpolate.SignalRecord(
            sr.query_id, sr.reference,
            _tra_candidate_rows(sr, decision == model.REWRITE), sr.domain))
    w_tra = (interpolate.tune_weights(signal_records) if signal_records
             else interpolate.ASR_WEIGHTS)
    path = os.path.join(args.out, "weights_tra.txt")
    interpolate.save_weights(w_tra, path)
    outputs["weights_tra"] = path
    print(f"weights_tra: {_format_weights(w_tra)}")
    write_manifest(os.path.join(args.out, "manifest.txt"), "tune", cfg, inputs, outputs)


def _eval_methods(th, w4, w_tra):
    """The table rows: name -> final words for one (tra, tr, ngram) triple."""

    def asr(tra, tr, ng):
        return tra.rows[0].words

    def fourgram(tra, tr, ng):
        recs = _ngram_signal_records([ng])[0]
        return recs.rows[interpolate.select(recs.rows, w4)].words

    def tr_rerank(tra, tr, ng):
        return tr.rows[int(np.argmax([r.score for r in tr.rows]))].words

    def tra_rescore(tra, tr, ng):
        _, words = _tra_decision(tra, th.threshold_r, math.inf)
        return words

    def tra_rewrite(tra, tr, ng):
        decision, words = _tra_decision(tra, th.threshold_r, th.threshold_w)
        if decision == model.KEEP_ASR:
            return words
        rows = _tra_candidate_rows(tra, decision == model.REWRITE)
        return rows[interpolate.select(rows, w_tra)].words

    return [("ASR", asr), ("4-gram+W*", fourgram), ("TR", tr_rerank),
            ("TRA-R", tra_rescore), ("TRA-RW (+W*)", tra_rewrite)]


def _format_table(methods, sets, cells) -> str:
    grid = [["method"] + sets]
    for name, _ in methods:
        row = [name]
        for s in sets:
            wer, rel = cells[(name, s)]
            if name == "ASR":
                row.append(f"{wer * 100:.2f}")
            else:
                row.append(f"{wer * 100:.2f} ({rel * 100:.1f}%)")
        grid.append(row)
    widths = [max(len(r[i]) for r in grid) for i in range(len(grid[0]))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in grid]
    return "\n".join(lines) + "\n"


def cmd_eval(args, cfg):
    tra = read_scored(args.tra_scored)
    tr = read_scored(args.tr_scored)
    ng = read_scored(args.ngram_scored)
    if not tra:
        raise InputError(f"eval: no records in {args.tra_scored}")
    ids = [r.query_id for r in tra]
    if [r.query_id for r in tr] != ids or [r.query_id for r in ng] != ids:
        raise InputError("eval: scored files cover different records")
    th = _load_thresholds(os.path.join(args.tune, "thresholds.txt"))
    w4 = interpolate.load_weights(os.path.join(args.tune, "weights_4gram.txt"))
    w_tra = interpolate.load_weights(os.path.join(args.tune, "weights_tra.txt"))

    methods = _eval_methods(th, w4, w_tra)
    domains = sorted({r.domain for r in tra})
    sets = domains + ["all"]
    slices = {s: [i for i, r in enumerate(tra) if r.domain == s] for s in domains}
    slices["all"] = list(range(len(tra)))

    wers = {}
    for name, fn in methods:
        hyps = [fn(tra[i], tr[i], ng[i]) for i in range(len(tra))]
        for s in sets:
            wers[(name, s)] = metrics.corpus_wer(
                [(hyps[i], tra[i].reference) for i in slices[s]])
    cells = {}
    for name, _ in methods:
        for s in sets:
            asr_wer = wers[("ASR", s)]
            rel = (asr_wer - wers[(name, s)]) / asr_wer if asr_wer > 0 else 0.0
            cells[(name, s)] = (wers[(name, s)], rel)

    table = _format_table(methods, sets, cells)
    print(table, end="")
    with open(args.out, "w", encoding="utf-8") as f:
        f.write(table)
    tsv_path = os.path.splitext(args.out)[0] + ".tsv"
    with open(tsv_path, "w", encoding="utf-8") as f:
        f.write("method\tset\twer\trel_vs_asr\n")
        for name, _ in methods:
            for s in sets:
                wer, rel = cells[(name, s)]
                f.write(f"{name}\t{s}\t{wer:.6f}\t{rel:.6f}\n")
    write_manifest(args.out + ".manifest", "eval", cfg,
                   {"tra_scored": args.tra_scored, "tr_scored": args.tr_scored,
                    "ngram_scored": args.ngram_scored, "tune": args.tune},
                   {"table": args.out, "tsv": tsv_path})


# ---------------------------------------------------------------------------
# argument parsing and dispatch

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise InputError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nbestrr",
                     description="N-best rescoring and rewriting pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key")
        p.add_argument("--seed", type=int, help="override the root seed")

    p = sub.add_parser("synth", help="generate N-best records through the error channel")
    common(p)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("tokenize", help="train the subword vocabulary")
    common(p)
    p.add_argument("--records", required=True, help="training records JSONL")
    p.add_argument("--out", required=True, help="vocabulary file")

    p = sub.add_parser("train", help="train a rescorer")
    common(p)
    p.add_argument("--records", required=True, help="training records JSONL")
    p.add_argument("--dev", help="dev records JSONL (transformer variants)")
    p.add_argument("--vocab", help="vocabulary file (transformer variants)")
    p.add_argument("--variant", choices=("TR", "TRA", "ngram"), default="TRA")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("score", help="score records with a trained rescorer")
    common(p)
    p.add_argument("--records", required=True, help="records JSONL")
    p.add_argument("--model", required=True, help="model directory or ARPA file")
    p.add_argument("--vocab", help="vocabulary file (transformer rescorers)")
    p.add_argument("--rescorer", choices=("tra", "tr", "ngram"), default="tra")
    p.add_argument("--out", required=True, help="scored records JSONL")

    p = sub.add_parser("tune", help="tune thresholds and interpolation weights")
    common(p)
    p.add_argument("--tra-scored", required=True, help="dev records scored with tra")
    p.add_argument("--ngram-scored", help="dev records scored with the n-gram model")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("eval", help="print the WER table")
    common(p)
    p.add_argument("--tra-scored", required=True, help="eval records scored with tra")
    p.add_argument("--tr-scored", required=True, help="eval records scored with tr")
    p.add_argument("--ngram-scored", required=True,
                   help="eval records scored with the n-gram model")
    p.add_argument("--tune", required=True, help="directory written by tune")
    p.add_argument("--out", required=True, help="table text file; TSV written alongside")
    return parser


_COMMANDS = {"synth": cmd_synth, "tokenize": cmd_tokenize, "train": cmd_train,
             "score": cmd_score, "tune": cmd_tune, "eval": cmd_eval}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
        _COMMANDS[args.command](args, cfg)
        return 0
    except (InputError, ParseError, ConfigurationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # pragma: no cover - defensive
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
