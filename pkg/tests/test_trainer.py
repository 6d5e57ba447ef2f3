import csv

import numpy as np
import pytest

from ccv import trainer
from ccv.net import checkpoint_bytes
from ccv.synthetic import sample_task
from ccv.trainer import TrainConfig, TrainingDiverged, sample_episode, train_backbone

TINY = dict(steps=3, batch_episodes=2, context_size=2, side=16, base_channels=4, val_every=2, val_episodes=2)


class TestSampleEpisode:
    def test_support_size(self):
        q, support = sample_episode(0, 5, 6)
        assert len(support) == 6
        assert q.image.shape == (1, 64, 64)

    def test_deterministic(self):
        a = sample_episode(3, 9, 3, side=32)
        b = sample_episode(3, 9, 3, side=32)
        for x, y in zip([a[0]] + a[1], [b[0]] + b[1]):
            assert np.array_equal(x.image, y.image) and np.array_equal(x.mask, y.mask)

    def test_query_differs_from_support(self):
        q, support = sample_episode(1, 2, 4)
        assert all(not np.array_equal(q.mask, s.mask) for s in support)

    def test_one_task_per_episode(self):
        # every pair of an episode shares the foreground mean of one task
        q, support = sample_episode(4, 0, 5)
        means = [p.image[p.mask == 1].mean() for p in [q] + support]
        assert max(means) - min(means) < 0.1

    def test_train_and_val_streams_differ(self):
        a, _ = sample_episode(0, 0, 1, split="train")
        b, _ = sample_episode(0, 0, 1, split="val")
        assert not np.array_equal(a.image, b.image)

    def test_context_size_must_be_positive(self):
        with pytest.raises(ValueError, match="context_size"):
            sample_episode(0, 0, 0)


class TestTrainBackbone:
    def test_log_and_determinism(self, tmp_path):
        cfg = TrainConfig(**TINY)
        a = train_backbone(cfg, log_path=tmp_path / "a.csv")
        b = train_backbone(cfg, log_path=tmp_path / "b.csv")
        assert checkpoint_bytes(a) == checkpoint_bytes(b)
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        with open(tmp_path / "a.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["step"] for r in rows] == ["1", "2", "3"]
        assert rows[0]["val_dice"] == "" and rows[1]["val_dice"] != "" and rows[2]["val_dice"] != ""
        assert all(np.isfinite(float(r["loss"])) for r in rows)
        assert all(not p.requires_grad for p in a.parameters())

    def test_training_changes_weights(self):
        from ccv.net import Architecture, ModelWeights
        cfg = TrainConfig(**TINY)
        init = ModelWeights.initialize(Architecture(levels=3, base_channels=4, image_side=16), seed=cfg.seed)
        assert not train_backbone(cfg).equal(init)

    def test_divergence_names_step(self, monkeypatch):
        real = trainer.episode_loss
        calls = {"n": 0}

        def poisoned(*args):
            calls["n"] += 1
            loss = real(*args)
            return loss * float("nan") if calls["n"] == 2 else loss

        monkeypatch.setattr(trainer, "episode_loss", poisoned)
        with pytest.raises(TrainingDiverged, match="diverged at step 2"):
            train_backbone(TrainConfig(**TINY))

    def test_episodes_are_from_fresh_tasks(self):
        specs = set()
        for step in range(10):
            q, _ = sample_episode(0, step, 1)
            specs.add(float(q.image.max()))
        assert len(specs) > 1
        assert sample_task(0, 1) != sample_task(0, 2)
