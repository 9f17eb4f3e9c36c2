"""Optimizer, training-loop, and checkpoint round-trip tests."""

import dataclasses
import json
import os

import numpy as np
import pytest

from promptrec import corpus, trainer
from promptrec.config import TrainConfig
from promptrec.diffcore import no_grad
from promptrec.pipeline import ModelState, forward_batch
from promptrec.trainer import Adam, Checkpoint, load_checkpoint, save_checkpoint


def tiny_cfg(**kw):
    base = dict(seed=5, epochs=2, batch_size=8, d_rs=8, backbone_blocks=1,
                backbone_heads=2, d_llm=8, lm_layers=1, lm_heads=2,
                codebook_size=4, shared_prompts=2, lora_rank=2, t_max=8,
                t_text=3, l_max=32, theta=0.2, eval_batch=32)
    base.update(kw)
    return TrainConfig(**base).validate()


@pytest.fixture(scope="module")
def dataset():
    return corpus.prepare(corpus.synth_generate(12, 16, 3, 0.8, seed=4))


class TestTrainStep:
    def test_frozen_base_bitwise_unchanged(self, dataset):
        cfg = tiny_cfg()
        state = ModelState.initialize(cfg, dataset)
        before = {e.name: e.tensor.data.copy()
                  for e in state.registry.entries() if e.frozen}
        opt = Adam(state.registry, cfg.lr, {"lora": cfg.lr_lora})
        batch = corpus.make_batches(dataset, cfg.batch_size, cfg.t_max, seed=0)[0]
        trainer.train_step(state, batch, opt)
        for e in state.registry.entries():
            if e.frozen:
                np.testing.assert_array_equal(e.tensor.data, before[e.name])
        assert all(e.group == "lm_base" for e in state.registry.entries()
                   if e.frozen)

    def test_zero_weights_and_full_mask_freeze_codebook(self, dataset):
        """With the auxiliary weights off and every row gated, the codebook's
        only gradient route is the stopped fused path, so it cannot move."""
        cfg = tiny_cfg(alpha=0.0, beta=0.0, gamma=0.0, variant="con")
        state = ModelState.initialize(cfg, dataset)
        z_before = state.codebook.z.data.copy()
        share_before = state.codebook.z_share.data.copy()
        opt = Adam(state.registry, cfg.lr, {"lora": cfg.lr_lora})
        batch = corpus.make_batches(dataset, cfg.batch_size, cfg.t_max, seed=0)[0]
        trainer.train_step(state, batch, opt)
        np.testing.assert_array_equal(state.codebook.z.data, z_before)
        np.testing.assert_array_equal(state.codebook.z_share.data, share_before)

    def test_deterministic_loss_trajectory(self, dataset):
        def run():
            cfg = tiny_cfg()
            state = ModelState.initialize(cfg, dataset)
            opt = Adam(state.registry, cfg.lr, {"lora": cfg.lr_lora})
            batches = corpus.make_batches(dataset, cfg.batch_size, cfg.t_max,
                                          seed=1)
            losses = []
            for batch in batches[:10]:
                losses.append(trainer.train_step(state, batch, opt)["l_total"])
            return losses

        assert run() == run()

    def test_non_finite_loss_aborts_with_term_name(self, dataset):
        cfg = tiny_cfg()
        state = ModelState.initialize(cfg, dataset)
        state.backbone.item_emb.data[0, 0] = np.inf
        opt = Adam(state.registry, cfg.lr)
        batch = corpus.make_batches(dataset, cfg.batch_size, cfg.t_max, seed=0)[0]
        with pytest.raises(trainer.TrainerError, match="l_"):
            trainer.train_step(state, batch, opt)


class TestAdam:
    def test_skips_missing_gradients(self):
        from promptrec.diffcore import ParameterRegistry, Tensor

        reg = ParameterRegistry()
        a = reg.register("a", Tensor(np.ones(3)))
        b = reg.register("b", Tensor(np.ones(3)))
        opt = Adam(reg, lr=0.1)
        a.grad = np.ones(3)
        opt.step()
        assert np.abs(a.data - 1.0).max() > 0
        np.testing.assert_array_equal(b.data, np.ones(3))

    def test_zero_lr_group_is_frozen(self):
        from promptrec.diffcore import ParameterRegistry, Tensor

        reg = ParameterRegistry()
        a = reg.register("a", Tensor(np.ones(3)), group="lora")
        opt = Adam(reg, lr=0.1, group_lr={"lora": 0.0})
        a.grad = np.ones(3)
        opt.step()
        np.testing.assert_array_equal(a.data, np.ones(3))

    def test_clip_rescales_to_max_norm(self):
        from promptrec.diffcore import ParameterRegistry, Tensor

        reg = ParameterRegistry()
        a = reg.register("a", Tensor(np.zeros(4)))
        opt = Adam(reg, lr=0.1)
        a.grad = np.full(4, 10.0)
        norm = opt.clip_global_norm(5.0)
        assert norm == pytest.approx(20.0)
        assert np.linalg.norm(a.grad) == pytest.approx(5.0)


class TestFit:
    def test_epochs_zero_returns_initial_model(self, dataset):
        cfg = tiny_cfg(epochs=0)
        result = trainer.fit(dataset, cfg)
        assert result.epoch_log == []
        assert result.report.split == "test"
        assert result.checkpoint.best_valid is None

    def test_fit_deterministic(self, dataset):
        cfg = tiny_cfg(epochs=2)
        r1 = trainer.fit(dataset, cfg)
        r2 = trainer.fit(dataset, tiny_cfg(epochs=2))
        assert r1.report.recall == r2.report.recall
        assert r1.report.ndcg == r2.report.ndcg
        assert r1.epoch_log == r2.epoch_log
        for name in r1.checkpoint.params:
            np.testing.assert_array_equal(
                r1.checkpoint.params[name], r2.checkpoint.params[name])

    def test_best_checkpoint_by_valid_recall(self, dataset, monkeypatch):
        from promptrec import evalkit

        fabricated = iter([0.1, 0.3, 0.2])
        real_evaluate = evalkit.evaluate
        snapshots = []

        def fake_evaluate(state, d, split, **kw):
            rep = real_evaluate(state, d, split, **kw)
            if split == "valid":
                r = next(fabricated)
                rep.recall = {5: r}
                rep.ndcg = {5: r}
                snapshots.append(state.registry.snapshot())
            return rep

        monkeypatch.setattr(evalkit, "evaluate", fake_evaluate)
        cfg = tiny_cfg(epochs=3, patience=5)
        result = trainer.fit(dataset, cfg)
        assert result.checkpoint.best_valid == pytest.approx(0.3)
        assert result.checkpoint.epoch == 1  # second epoch wins
        for name, arr in snapshots[1].items():
            np.testing.assert_array_equal(result.checkpoint.params[name], arr)

    def test_early_stopping_patience(self, dataset, monkeypatch):
        from promptrec import evalkit

        real_evaluate = evalkit.evaluate
        calls = []

        def fake_evaluate(state, d, split, **kw):
            rep = real_evaluate(state, d, split, **kw)
            if split == "valid":
                rep.recall = {5: 0.5}  # never improves after epoch 0
                rep.ndcg = {5: 0.5}
                calls.append(split)
            return rep

        monkeypatch.setattr(evalkit, "evaluate", fake_evaluate)
        cfg = tiny_cfg(epochs=50, patience=2)
        result = trainer.fit(dataset, cfg)
        assert len(result.epoch_log) == 3  # epoch 0 best, stop after 2 flat

    def test_epoch_log_written(self, dataset, tmp_path):
        log = tmp_path / "metrics.jsonl"
        cfg = tiny_cfg(epochs=1)
        trainer.fit(dataset, cfg, log_path=str(log))
        lines = [json.loads(s) for s in log.read_text().splitlines()]
        assert len(lines) == 1
        for key in ("epoch", "l_total", "valid_r5", "mask_fraction", "mean_m"):
            assert key in lines[0]


class TestCheckpoint:
    def _fit(self, dataset, **kw):
        return trainer.fit(dataset, tiny_cfg(epochs=1, **kw))

    def test_save_load_save_byte_identical(self, dataset, tmp_path):
        res = self._fit(dataset)
        p1, p2 = str(tmp_path / "a.coco"), str(tmp_path / "b.coco")
        save_checkpoint(res.checkpoint, p1)
        loaded = load_checkpoint(p1)
        save_checkpoint(loaded, p2)
        with open(p1, "rb") as f1, open(p2, "rb") as f2:
            assert f1.read() == f2.read()

    def test_load_restores_bitwise_forward(self, dataset, tmp_path):
        res = self._fit(dataset)
        path = str(tmp_path / "ck.coco")
        save_checkpoint(res.checkpoint, path)
        state1 = trainer.state_from_checkpoint(res.checkpoint, dataset)
        state2 = trainer.state_from_checkpoint(load_checkpoint(path), dataset)
        batch = corpus.make_batches(dataset, 8, state1.cfg.t_max, seed=9)[0]
        with no_grad():
            a = forward_batch(state1, batch, training=False).h_aligned.data
            b = forward_batch(state2, batch, training=False).h_aligned.data
        np.testing.assert_array_equal(a, b)

    def test_version_mismatch_names_both(self, dataset, tmp_path):
        res = self._fit(dataset)
        path = str(tmp_path / "ck.coco")
        save_checkpoint(res.checkpoint, path)
        blob = bytearray(open(path, "rb").read())
        blob[4:8] = (99).to_bytes(4, "little")
        open(path, "wb").write(bytes(blob))
        with pytest.raises(trainer.CheckpointError, match="99.*1"):
            load_checkpoint(path)

    def test_corrupted_file_structured_error(self, dataset, tmp_path):
        path = str(tmp_path / "junk.coco")
        with open(path, "wb") as fh:
            fh.write(b"COCO" + (1).to_bytes(4, "little") + b"garbage")
        with pytest.raises(trainer.CheckpointError):
            load_checkpoint(path)
        path2 = str(tmp_path / "short.coco")
        res = self._fit(dataset)
        save_checkpoint(res.checkpoint, str(tmp_path / "full.coco"))
        blob = open(str(tmp_path / "full.coco"), "rb").read()
        open(path2, "wb").write(blob[: len(blob) // 2])
        with pytest.raises(trainer.CheckpointError):
            load_checkpoint(path2)

    def test_bad_magic(self, tmp_path):
        path = str(tmp_path / "not.coco")
        open(path, "wb").write(b"NOPE" + bytes(100))
        with pytest.raises(trainer.CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_catalog_mismatch_rejected(self, dataset, tmp_path):
        res = self._fit(dataset)
        other = corpus.prepare(corpus.synth_generate(12, 18, 3, 0.8, seed=4))
        with pytest.raises(trainer.CheckpointError, match="catalog"):
            trainer.state_from_checkpoint(res.checkpoint, other)

    def test_config_round_trips_through_checkpoint(self, dataset, tmp_path):
        res = self._fit(dataset)
        path = str(tmp_path / "ck.coco")
        save_checkpoint(res.checkpoint, path)
        loaded = load_checkpoint(path)
        assert dataclasses.asdict(loaded.config) == dataclasses.asdict(
            res.checkpoint.config)
        assert loaded.vocab == res.checkpoint.vocab
        assert loaded.rng_state == res.checkpoint.rng_state
