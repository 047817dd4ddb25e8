"""Training loop: schedule, Adam, determinism, checkpoint format, resume."""

import numpy as np
import pytest

from amber_mini.config import load_config
from amber_mini.corpus import Vocabulary, make_parallel
from amber_mini.encoder import Encoder, ModelConfig
from amber_mini.objectives import ObjectiveFlags
from amber_mini.trainer import (MAGIC, Adam, CheckpointFormatError, ConfigError,
                                TrainConfig, load_checkpoint, lr_schedule,
                                run_training, save_checkpoint)

from conftest import toy_languages


# -- schedule -----------------------------------------------------------------

class TestLrSchedule:
    def test_step_zero_is_zero(self):
        assert lr_schedule(0, 100, 1000, 1e-3) == 0.0

    def test_peak_at_warmup_end(self):
        assert lr_schedule(100, 100, 1000, 1e-3) == pytest.approx(1e-3)

    def test_decay_midpoint(self):
        assert lr_schedule(600, 100, 1100, 1e-4) == pytest.approx(5e-5)

    def test_zero_at_total(self):
        assert lr_schedule(1000, 100, 1000, 1e-3) == pytest.approx(0.0)

    def test_warmup_must_precede_total(self):
        with pytest.raises(ConfigError):
            lr_schedule(5, 10, 10, 1e-3)

    def test_step_outside_range_rejected(self):
        with pytest.raises(ValueError):
            lr_schedule(1001, 100, 1000, 1e-3)


# -- training world -----------------------------------------------------------

def _world(seed=0, precision="train32"):
    langs = toy_languages()
    vocab = Vocabulary(langs, 8)
    rng = np.random.default_rng(9)
    for lang in langs:
        lang.corpus_size = 40
    mono = {l: [rng.integers(*vocab.lang_block(l), size=5) for _ in range(40)]
            for l in langs}
    par = {"l0-l1": [make_parallel(rng.integers(0, 8, size=5), langs[0],
                                   langs[1], vocab) for _ in range(30)]}
    model_cfg = ModelConfig(vocab_size=len(vocab), layers=2, heads=2,
                            hidden=32, ffn_dim=64, max_positions=40,
                            precision=precision)
    return Encoder(model_cfg, seed=seed), mono, par


def _cfg(**kw):
    base = dict(steps=10, warmup_steps=2, peak_lr=1e-3, batch_size=6, seed=0)
    base.update(kw)
    return TrainConfig(**base)


class TestTrainConfig:
    def test_warmup_bound_enforced(self):
        with pytest.raises(ConfigError):
            TrainConfig(steps=10, warmup_steps=10)

    def test_zero_steps_allowed(self):
        cfg = TrainConfig(steps=0, warmup_steps=0)
        assert cfg.steps == 0

    def test_roundtrip(self):
        cfg = _cfg(objectives=ObjectiveFlags.from_names(["mlm", "sa"]))
        back = TrainConfig.from_dict(cfg.to_dict())
        assert back.to_dict() == cfg.to_dict()

    def test_sa_needs_batch_of_two(self):
        with pytest.raises(ConfigError):
            TrainConfig(steps=10, warmup_steps=1, batch_size=1)


class TestTrainingLoop:
    def test_lr_zero_leaves_parameters_unchanged(self):
        # step 0 of a warmup schedule has lr exactly 0
        from amber_mini.corpus import sample_batch
        from amber_mini.trainer import train_step
        model, mono, par = _world()
        opt = Adam(model)
        batch = sample_batch(mono, par, 6, 0.7, np.random.default_rng(0))
        cfg = _cfg(steps=10, warmup_steps=5)
        before = {k: np.array(v.data, copy=True)
                  for k, v in model.params.items()}
        train_step(model, opt, batch, cfg, 0, np.random.default_rng(1))
        for k in before:
            np.testing.assert_array_equal(model.params[k].data, before[k])

    def test_identical_runs_identical_history(self):
        hist = []
        for _ in range(2):
            model, mono, par = _world()
            opt = Adam(model)
            hist.append(run_training(model, opt, _cfg(), mono, par))
        a, b = hist
        assert [h.total for h in a] == [h.total for h in b]
        assert [h.mlm for h in a] == [h.mlm for h in b]

    def test_loss_decreases_over_toy_run(self):
        model, mono, par = _world()
        opt = Adam(model, clip_norm=1.0)
        cfg = _cfg(steps=300, warmup_steps=30)
        history = run_training(model, opt, cfg, mono, par)
        assert history[-1].total < history[0].total

    def test_mlm_only_ignores_parallel(self):
        model, mono, par = _world()
        opt = Adam(model)
        cfg = _cfg(objectives=ObjectiveFlags.from_names(["mlm"]))
        history = run_training(model, opt, cfg, mono, par)
        assert all(h.sa == 0.0 and h.wa == 0.0 and h.parallel_pairs == 0
                   for h in history)

    def test_metrics_jsonl_schema(self, tmp_path):
        import json
        model, mono, par = _world()
        opt = Adam(model)
        metrics = tmp_path / "metrics.jsonl"
        run_training(model, opt, _cfg(steps=5, warmup_steps=1), mono, par,
                     metrics_path=metrics)
        lines = metrics.read_text().splitlines()
        assert len(lines) == 5
        for i, line in enumerate(lines):
            rec = json.loads(line)
            assert set(rec) == {"step", "lr", "mlm", "sa", "wa", "total",
                                "wall_ms"}
            assert rec["step"] == i

    def test_clip_infinite_is_noop(self):
        results = []
        for clip in (None, float("inf")):
            model, mono, par = _world()
            opt = Adam(model, clip_norm=clip)
            run_training(model, opt, _cfg(steps=5, warmup_steps=1), mono, par)
            results.append({k: np.array(v.data)
                            for k, v in model.params.items()})
        for k in results[0]:
            np.testing.assert_array_equal(results[0][k], results[1][k])


# -- checkpointing ------------------------------------------------------------

class TestCheckpoint:
    def test_roundtrip_bitwise(self, tmp_path):
        model, mono, par = _world()
        opt = Adam(model)
        run_training(model, opt, _cfg(steps=3, warmup_steps=1), mono, par)
        path = tmp_path / "ck.bin"
        save_checkpoint(path, model, opt, 3, _cfg())
        state = load_checkpoint(path)
        assert state.step == 3 and state.adam_t == opt.t
        for name, p in model.params.items():
            np.testing.assert_array_equal(state.params[name], p.data)
            np.testing.assert_array_equal(state.adam_m[name], opt.m[name])
            np.testing.assert_array_equal(state.adam_v[name], opt.v[name])

    def test_magic_prefix(self, tmp_path):
        model, _, _ = _world()
        path = tmp_path / "ck.bin"
        save_checkpoint(path, model, Adam(model), 0, _cfg())
        assert path.read_bytes()[:8] == MAGIC == b"AMBRCKPT"

    def test_corrupt_magic_rejected(self, tmp_path):
        model, _, _ = _world()
        path = tmp_path / "ck.bin"
        save_checkpoint(path, model, Adam(model), 0, _cfg())
        blob = bytearray(path.read_bytes())
        blob[0] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointFormatError, match="magic"):
            load_checkpoint(path)

    def test_unsupported_version_rejected(self, tmp_path):
        import struct
        model, _, _ = _world()
        path = tmp_path / "ck.bin"
        save_checkpoint(path, model, Adam(model), 0, _cfg())
        blob = bytearray(path.read_bytes())
        blob[8:12] = struct.pack("<I", 99)
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointFormatError, match="version"):
            load_checkpoint(path)

    def test_truncated_blob_rejected(self, tmp_path):
        model, _, _ = _world()
        path = tmp_path / "ck.bin"
        save_checkpoint(path, model, Adam(model), 0, _cfg())
        blob = path.read_bytes()
        path.write_bytes(blob[:len(blob) - 16])
        with pytest.raises(CheckpointFormatError, match="truncated"):
            load_checkpoint(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        model, _, _ = _world()
        path = tmp_path / "ck.bin"
        save_checkpoint(path, model, Adam(model), 0, _cfg())
        path.write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(CheckpointFormatError, match="trailing"):
            load_checkpoint(path)

    def test_resume_equals_uninterrupted(self, tmp_path):
        # 100 straight steps
        cfg = _cfg(steps=100, warmup_steps=10)
        model_a, mono, par = _world()
        opt_a = Adam(model_a, clip_norm=1.0)
        opt_a.clip_norm = cfg.clip_norm
        run_training(model_a, opt_a, cfg, mono, par)

        # 50 steps under the same 100-step schedule, checkpoint, reload, 50 more
        from amber_mini.corpus import sample_batch
        from amber_mini.trainer import train_step
        model_b, mono, par = _world()
        opt_b = Adam(model_b, clip_norm=cfg.clip_norm)
        for step in range(0, 50):
            sample_rng = np.random.default_rng([cfg.seed, step, 0])
            mask_rng = np.random.default_rng([cfg.seed, step, 1])
            batch = sample_batch(mono, par, cfg.batch_size, cfg.smoothing,
                                 sample_rng, parallel_fraction=cfg.parallel_fraction)
            train_step(model_b, opt_b, batch, cfg, step, mask_rng)
        path = tmp_path / "mid.bin"
        save_checkpoint(path, model_b, opt_b, 50, cfg)

        state = load_checkpoint(path)
        model_c = state.build_model()
        opt_c = state.build_optimizer(model_c, cfg)
        run_training(model_c, opt_c, cfg, mono, par, start_step=state.step)

        for name in model_a.params:
            np.testing.assert_array_equal(model_a.params[name].data,
                                          model_c.params[name].data)


# -- full-config integration --------------------------------------------------

class TestConfigIntegration:
    def test_default_config_validates(self):
        cfg = load_config({})
        assert cfg.train_config().steps > 0
        assert cfg.model_config().vocab_size == 4 + 4 * 64

    def test_unknown_field_rejected(self):
        with pytest.raises(ConfigError):
            load_config({"trian": {}})

    def test_unknown_nested_field_rejected(self):
        with pytest.raises(ConfigError, match="train"):
            load_config({"train": {"step": 5}})

    def test_seed_override(self):
        cfg = load_config({"seed": 3}, seed_override=11)
        assert cfg.seed == 11

    def test_bad_parallel_language_rejected(self):
        with pytest.raises(ConfigError):
            load_config({"corpus": {"parallel": [
                {"src": "l0", "tgt": "nope", "size": 100}]}})
