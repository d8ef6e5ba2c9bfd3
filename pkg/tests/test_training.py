import numpy as np
import pytest
import torch

from ptreid.augment import AugmentConfig
from ptreid.checkpoints import module_fingerprint
from ptreid.datasets import DatasetSplit, make_split
from ptreid.losses import GanLossWeights
from ptreid.networks import FeatureExtractor
from ptreid.toydata import ToySpec, synth_toy_dataset
from ptreid.training import (
    DivergenceError,
    GanTrainConfig,
    _check_finite,
    make_training_pairs,
    train_identity_backbone,
    train_ptgan,
)


@pytest.fixture(scope="module")
def small_split():
    samples, _ = synth_toy_dataset(ToySpec(num_identities=6, images_per_identity=4))
    return make_split(samples, "toy")


@pytest.fixture(scope="module")
def small_extractor(small_split):
    torch.manual_seed(0)
    return FeatureExtractor("toy", descriptor_dim=16, input_size=(64, 32), base_channels=8)


class TestConfig:
    def test_beta_bounds(self):
        with pytest.raises(ValueError):
            GanTrainConfig(adam_beta1=1.0)
        with pytest.raises(ValueError):
            GanTrainConfig(label_smooth_noise=1.5)


class TestMakeTrainingPairs:
    def test_pairs_share_identity_and_differ(self, small_split):
        stream = make_training_pairs(small_split, np.random.default_rng(0))
        for _ in range(200):
            pair = next(stream)
            assert pair.source.identity == pair.target.identity == pair.identity
            assert pair.source.path != pair.target.path
            assert pair.target_pose is pair.target.pose

    def test_identity_with_two_images_uses_both_orders(self):
        samples, _ = synth_toy_dataset(ToySpec(num_identities=2, images_per_identity=2))
        split = DatasetSplit(train=tuple(samples), gallery=(), query=())
        stream = make_training_pairs(split, np.random.default_rng(1))
        seen = {(p.source.path, p.target.path) for _, p in zip(range(100), stream)}
        assert len(seen) == 4  # two identities x two orderings

    def test_identity_frequency_uniform(self, small_split):
        stream = make_training_pairs(small_split, np.random.default_rng(7))
        counts: dict[int, int] = {}
        draws = 10_000
        for _ in range(draws):
            counts[next(stream).identity] = counts.get(next(stream).identity, 0) + 1
        identities = sorted({s.identity for s in small_split.train})
        p = 1.0 / len(identities)
        sigma = np.sqrt(draws * p * (1 - p))
        for identity in identities:
            assert abs(counts.get(identity, 0) - draws * p) < 3 * sigma

    def test_no_eligible_identity_is_error(self, small_split):
        stripped = DatasetSplit(
            train=tuple(s.with_pose(None) for s in small_split.train),
            gallery=small_split.gallery,
            query=small_split.query,
        )
        with pytest.raises(ValueError, match="posed"):
            next(make_training_pairs(stripped))


class TestTrainPtgan:
    def test_smoke_one_epoch_checkpoint_and_finite_history(self, small_split, small_extractor, tmp_path):
        cfg = GanTrainConfig(epochs=1, batch_size=4, seed=3, checkpoint_every=1)
        gen, disc, history = train_ptgan(
            small_split, small_extractor, cfg, aug=None, image_size=(64, 32), base_channels=8,
            residual_blocks=1, steps_per_epoch=2, checkpoint_dir=tmp_path,
        )
        assert all(np.isfinite(v) for values in history.values() for v in values)
        assert (tmp_path / "gan_epoch0001.ckpt").exists()

    def test_same_seed_reproduces_history(self, small_split, small_extractor):
        cfg = GanTrainConfig(epochs=2, batch_size=4, seed=11)
        kwargs = dict(aug=AugmentConfig(seed=1), image_size=(64, 32), base_channels=8,
                      residual_blocks=1, steps_per_epoch=2)
        _, _, h1 = train_ptgan(small_split, small_extractor, cfg, **kwargs)
        _, _, h2 = train_ptgan(small_split, small_extractor, cfg, **kwargs)
        assert h1 == h2

    def test_extractor_frozen(self, small_split, small_extractor):
        before = module_fingerprint(small_extractor)
        cfg = GanTrainConfig(epochs=1, batch_size=4, seed=5)
        train_ptgan(small_split, small_extractor, cfg, aug=None, image_size=(64, 32),
                    base_channels=8, residual_blocks=1, steps_per_epoch=1)
        assert module_fingerprint(small_extractor) == before

    def test_loss_weights_flow_into_objective(self, small_split, small_extractor):
        cfg = GanTrainConfig(epochs=1, batch_size=4, seed=9,
                             loss_weights=GanLossWeights(adversarial=0.0, l2=1.0, classification=0.0))
        _, _, history = train_ptgan(small_split, small_extractor, cfg, aug=None, image_size=(64, 32),
                                    base_channels=8, residual_blocks=1, steps_per_epoch=2)
        assert history["gen"][0] == pytest.approx(history["l2"][0], rel=1e-6)

    def test_divergence_guard(self):
        with pytest.raises(DivergenceError):
            _check_finite(1.0, float("nan"))
        with pytest.raises(DivergenceError):
            _check_finite(float("inf"))


class TestIdentityBackbone:
    def test_training_improves_and_early_stops(self, small_split):
        extractor, history = train_identity_backbone(
            list(small_split.train), "test", descriptor_dim=16, image_size=(64, 32),
            base_channels=8, epochs=40, lr=3e-3, seed=2, patience=8,
        )
        assert len(history["val_acc"]) <= 40
        assert max(history["val_acc"]) >= history["val_acc"][0]
        assert extractor.descriptor_dim == 16

    def test_deterministic(self, small_split):
        kwargs = dict(descriptor_dim=8, image_size=(64, 32), base_channels=4, epochs=3, seed=4)
        a, ha = train_identity_backbone(list(small_split.train), "a", **kwargs)
        b, hb = train_identity_backbone(list(small_split.train), "b", **kwargs)
        assert ha == hb
        assert module_fingerprint(a) == module_fingerprint(b)
