"""Training loop tests.

Covers batching under the token budget, the combined batch loss for both
model variants, dev evaluation, early stopping, and the determinism and
overfitting behavior of the full loop.
"""

import math

import numpy as np
import pytest

from nbestrr.corpus import Hypothesis, NBestRecord
from nbestrr.errors import ConfigurationError, UsageError
from nbestrr.metrics import edit_stats, query_similarity
from nbestrr.model import ModelConfig
from nbestrr.tokenizer import train_bpe
from nbestrr.trainer import (EarlyStopper, TrainConfig, batch_loss,
                             evaluate_loss, format_log_line, make_batches,
                             prepare_items, train)

WORDS = ["play", "pay", "the", "that", "song", "sing", "next", "nest",
         "track", "trick"]


def make_records(count, seed, prefix="q"):
    """Tiny N-best records over a fixed vocabulary with one-word errors."""
    rng = np.random.default_rng(seed)
    records = []
    for i in range(count):
        length = int(rng.integers(2, 5))
        ref = tuple(WORDS[j] for j in rng.integers(0, len(WORDS), size=length))
        hyps = [Hypothesis(words=ref, acoustic_logp=-0.3)]
        n = int(rng.integers(2, 4))
        for _ in range(n - 1):
            words = list(ref)
            pos = int(rng.integers(0, length))
            words[pos] = WORDS[int(rng.integers(0, len(WORDS)))]
            hyps.append(Hypothesis(words=tuple(words), acoustic_logp=-1.5))
        records.append(NBestRecord(f"{prefix}{i}", ref, hyps))
    return records


@pytest.fixture(scope="module")
def vocab():
    return train_bpe([" ".join(WORDS)] * 2, vocab_budget=40)


@pytest.fixture(scope="module")
def tiny_cfg():
    return ModelConfig(vocab_size=40, d_model=16, heads=2, enc_layers=1,
                       dec_layers=1, ff_dim=32, max_len=24, nbest_max=5,
                       dropout=0.0, variant="TRA")


class TestTrainConfig:
    def test_defaults_valid(self):
        cfg = TrainConfig()
        assert cfg.max_steps == 5000

    def test_eval_every_bounds(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(max_steps=10, eval_every=11)
        with pytest.raises(ConfigurationError):
            TrainConfig(eval_every=0)

    def test_budget_and_weight_validation(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(batch_token_budget=0)
        with pytest.raises(ConfigurationError):
            TrainConfig(aux_weight=-0.01)
        with pytest.raises(ConfigurationError):
            TrainConfig(clip_norm=0.0)


class TestEarlyStopper:
    def test_improvement_resets_counter(self):
        stopper = EarlyStopper(patience=2)
        assert not stopper.update(1.0)
        assert not stopper.update(1.5)
        assert not stopper.update(0.9)
        assert stopper.best == 0.9

    def test_stops_after_patience_flat_rounds(self):
        stopper = EarlyStopper(patience=2)
        stopper.update(1.0)
        assert not stopper.update(1.0)
        assert stopper.update(1.0)

    def test_equal_metric_is_not_improvement(self):
        stopper = EarlyStopper(patience=3)
        stopper.update(2.0)
        stopper.update(2.0)
        assert not stopper.improved


class TestPrepareItems:
    def test_supervision_targets_match_metrics(self, vocab):
        records = make_records(5, seed=0)
        items = prepare_items(records, vocab)
        for rec, item in zip(records, items):
            assert item.n == len(rec.hypotheses)
            for j, hyp in enumerate(rec.hypotheses):
                stats = edit_stats(hyp.words, rec.reference)
                assert item.word_errors[j] == float(stats.distance)
                assert item.similarities[j] == pytest.approx(
                    query_similarity(hyp.words, rec.reference))

    def test_tokens_round_trip_text(self, vocab):
        records = make_records(3, seed=1)
        items = prepare_items(records, vocab)
        assert vocab.decode(items[0].target) == " ".join(records[0].reference)


class TestMakeBatches:
    def test_batches_are_n_homogeneous_and_within_budget(self, vocab):
        records = make_records(30, seed=2)
        batches, skipped = make_batches(records, vocab, budget=120, seed=0)
        assert skipped == 0
        assert batches
        for batch in batches:
            sizes = {item.n for item in batch}
            assert len(sizes) == 1
            assert sum(item.token_count for item in batch) <= 120

    def test_every_fitting_record_appears_once(self, vocab):
        records = make_records(20, seed=3)
        batches, skipped = make_batches(records, vocab, budget=200, seed=1)
        seen = [item for batch in batches for item in batch]
        assert len(seen) + skipped == len(records)
        assert len({id(item) for item in seen}) == len(seen)

    def test_oversized_records_are_skipped_and_counted(self, vocab):
        records = make_records(10, seed=4)
        items = prepare_items(records, vocab)
        tight = min(item.token_count for item in items)
        batches, skipped = make_batches(records, vocab, budget=tight, seed=0)
        kept = sum(len(b) for b in batches)
        assert skipped >= 1
        assert kept + skipped == len(records)

    def test_long_hypotheses_skipped_by_model_length(self, vocab):
        records = make_records(10, seed=5)
        _, skipped_loose = make_batches(records, vocab, budget=500, seed=0,
                                        max_len=512)
        _, skipped_tight = make_batches(records, vocab, budget=500, seed=0,
                                        max_len=4)
        assert skipped_loose == 0
        assert skipped_tight == len(records)

    def test_deterministic_in_seed(self, vocab):
        records = make_records(25, seed=6)
        a, _ = make_batches(records, vocab, budget=150, seed=7)
        b, _ = make_batches(records, vocab, budget=150, seed=7)
        c, _ = make_batches(records, vocab, budget=150, seed=8)
        key = lambda bs: [[item.target for item in batch] for batch in bs]
        assert key(a) == key(b)
        assert key(a) != key(c)


class TestBatchLoss:
    def test_breakdown_identity_both_variants(self, vocab, tiny_cfg):
        from nbestrr.model import init_params
        records = make_records(4, seed=7)
        items = prepare_items(records, vocab)
        batch = [item for item in items if item.n == items[0].n][:2]
        for variant in ("TRA", "TR"):
            cfg = ModelConfig(**{**tiny_cfg.__dict__, "variant": variant})
            params = init_params(cfg, seed=0)
            lb = batch_loss(params, cfg, batch, variant, weight=0.01)
            assert float(lb.combined.values) == pytest.approx(
                lb.mwer_or_mqsd + 0.01 * lb.ce)
            assert math.isfinite(lb.ce)

    def test_empty_and_mixed_batches_raise(self, vocab, tiny_cfg):
        from nbestrr.model import init_params
        params = init_params(tiny_cfg, seed=0)
        with pytest.raises(UsageError):
            batch_loss(params, tiny_cfg, [], "TRA", 0.01)
        items = prepare_items(make_records(20, seed=8), vocab)
        by_n = {}
        for item in items:
            by_n.setdefault(item.n, item)
        mixed = list(by_n.values())[:2]
        assert len(mixed) == 2
        with pytest.raises(UsageError):
            batch_loss(params, tiny_cfg, mixed, "TRA", 0.01)

    def test_unknown_variant_raises(self, vocab, tiny_cfg):
        from nbestrr.model import init_params
        params = init_params(tiny_cfg, seed=0)
        items = prepare_items(make_records(2, seed=9), vocab)
        with pytest.raises(ConfigurationError):
            batch_loss(params, tiny_cfg, items[:1], "TRX", 0.01)


class TestEvaluateLoss:
    def test_matches_record_weighted_batch_losses(self, vocab, tiny_cfg):
        from nbestrr.model import init_params
        params = init_params(tiny_cfg, seed=1)
        items = prepare_items(make_records(6, seed=10), vocab)
        value = evaluate_loss(params, tiny_cfg, items, "TRA", 0.01, budget=400)
        assert math.isfinite(value) and value > 0

    def test_empty_dev_raises(self, tiny_cfg):
        from nbestrr.model import init_params
        params = init_params(tiny_cfg, seed=1)
        with pytest.raises(ConfigurationError):
            evaluate_loss(params, tiny_cfg, [], "TRA", 0.01, budget=400)


class TestTrain:
    def run_tiny(self, vocab, tiny_cfg, seed=0, steps=30):
        records = make_records(8, seed=11)
        dev = make_records(3, seed=12, prefix="d")
        cfg = TrainConfig(max_steps=steps, eval_every=10, batch_token_budget=400,
                          warmup=8, patience=50, seed=seed)
        return train("TRA", records, dev, tiny_cfg, cfg, vocab)

    def test_loss_decreases_on_tiny_corpus(self, vocab, tiny_cfg):
        from nbestrr.model import init_params
        records = make_records(8, seed=11)
        items = prepare_items(records, vocab)
        before = evaluate_loss(init_params(tiny_cfg, seed=0), tiny_cfg, items,
                               "TRA", 0.01, budget=400)
        result = self.run_tiny(vocab, tiny_cfg, steps=60)
        after = evaluate_loss(result.params, tiny_cfg, items, "TRA", 0.01,
                              budget=400)
        assert result.steps == 60
        assert after < before
        assert result.best_dev < math.inf

    def test_identical_seeds_identical_logs(self, vocab, tiny_cfg):
        a = self.run_tiny(vocab, tiny_cfg, seed=3, steps=12)
        b = self.run_tiny(vocab, tiny_cfg, seed=3, steps=12)
        assert a.log == b.log
        for key in a.params:
            np.testing.assert_array_equal(a.params[key].values,
                                          b.params[key].values)

    def test_best_checkpoint_matches_best_dev(self, vocab, tiny_cfg):
        result = self.run_tiny(vocab, tiny_cfg, steps=30)
        devs = [e["dev"] for e in result.log if "dev" in e]
        assert result.best_dev == pytest.approx(min(devs))

    def test_train_dev_overlap_raises(self, vocab, tiny_cfg):
        records = make_records(4, seed=13)
        with pytest.raises(ConfigurationError):
            train("TRA", records, records[:1], tiny_cfg, TrainConfig(), vocab)

    def test_log_line_formatting(self):
        line = format_log_line({"step": 3, "lr": 0.5, "loss": 1.25})
        assert line == "step=3 lr=0.500000 loss=1.250000"
