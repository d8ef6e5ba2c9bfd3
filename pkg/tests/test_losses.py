import math

import numpy as np
import pytest
import torch

from ptreid.losses import (
    GanLossParts,
    GanLossWeights,
    adversarial_loss,
    classification_loss,
    generator_adversarial_loss,
    l2_loss,
    smoothed_real_loss,
    total_gan_loss,
)


class TestAdversarialLoss:
    def test_half_half_closed_form(self):
        value = float(adversarial_loss(torch.tensor([0.5], dtype=torch.float64), torch.tensor([0.5], dtype=torch.float64)))
        assert value == pytest.approx(math.log(0.5) + math.log(0.5), abs=1e-9)
        assert value == pytest.approx(-1.3863, abs=1e-4)

    def test_optimum_clamped_to_zero(self):
        value = float(adversarial_loss(torch.tensor([1.0]), torch.tensor([0.0])))
        assert value == pytest.approx(0.0, abs=1e-5)

    def test_batch_hand_arithmetic(self):
        # mean of (log .9 + log .9, log .8 + log .8)
        expected = ((math.log(0.9) + math.log(0.9)) + (math.log(0.8) + math.log(0.8))) / 2
        value = float(adversarial_loss(torch.tensor([0.9, 0.8], dtype=torch.float64), torch.tensor([0.1, 0.2], dtype=torch.float64)))
        assert value == pytest.approx(expected, abs=1e-9)
        assert value == pytest.approx(-0.32850, abs=1e-4)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            adversarial_loss(torch.tensor([0.5, 0.5]), torch.tensor([0.5]))

    def test_non_saturating_variant(self):
        fake = torch.tensor([0.3], dtype=torch.float64)
        assert float(generator_adversarial_loss(fake)) == pytest.approx(math.log(0.7), abs=1e-7)
        assert float(generator_adversarial_loss(fake, non_saturating=True)) == pytest.approx(-math.log(0.3), abs=1e-7)

    def test_label_smoothing_reduces_to_plain_bce(self):
        d = torch.tensor([0.7, 0.9], dtype=torch.float64)
        plain = -(torch.log(d)).mean()
        assert float(smoothed_real_loss(d, torch.ones(2, dtype=torch.float64))) == pytest.approx(float(plain), abs=1e-9)


class TestL2Loss:
    def test_identical_is_zero(self, rng):
        x = torch.from_numpy(rng.uniform(size=(2, 3, 8, 4)))
        assert float(l2_loss(x, x.clone())) == 0.0

    def test_zeros_vs_ones_is_sqrt_n(self):
        zeros = torch.zeros(1, 3, 8, 4, dtype=torch.float64)
        ones = torch.ones(1, 3, 8, 4, dtype=torch.float64)
        assert float(l2_loss(zeros, ones)) == pytest.approx(math.sqrt(3 * 8 * 4), abs=1e-6)

    def test_matches_scalar_recomputation(self, rng):
        a = rng.uniform(size=(3, 2, 4, 4))
        b = rng.uniform(size=(3, 2, 4, 4))
        expected = np.mean([math.sqrt(float(((a[i] - b[i]) ** 2).sum())) for i in range(3)])
        assert float(l2_loss(torch.from_numpy(a), torch.from_numpy(b))) == pytest.approx(expected, abs=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            l2_loss(torch.zeros(1, 3), torch.zeros(1, 4))


class TestClassificationLoss:
    def test_perfect_prediction_is_zero(self):
        logits = torch.tensor([[100.0, 0.0, 0.0]])
        assert float(classification_loss(logits, torch.tensor([0]))) == pytest.approx(0.0, abs=1e-6)

    def test_uniform_over_four(self):
        logits = torch.zeros(1, 4, dtype=torch.float64)
        assert float(classification_loss(logits, torch.tensor([0]))) == pytest.approx(math.log(4), abs=1e-9)
        assert float(classification_loss(logits, torch.tensor([0]))) == pytest.approx(1.3863, abs=1e-4)

    def test_hand_softmax(self):
        logits = torch.tensor([[2.0, 1.0, 0.0]], dtype=torch.float64)
        probs = np.exp([2.0, 1.0, 0.0])
        probs = probs / probs.sum()
        expected = -math.log(probs[0])  # 0.40761
        assert float(classification_loss(logits, torch.tensor([0]))) == pytest.approx(expected, abs=1e-9)

    def test_sum_reduction_accumulates_samples(self):
        logits = torch.zeros(3, 4, dtype=torch.float64)
        labels = torch.tensor([0, 1, 2])
        assert float(classification_loss(logits, labels, reduction="sum")) == pytest.approx(3 * math.log(4), abs=1e-9)

    def test_out_of_range_label_rejected(self):
        with pytest.raises(ValueError):
            classification_loss(torch.zeros(1, 3), torch.tensor([3]))

    def test_finite_for_finite_inputs(self, rng):
        logits = torch.from_numpy(rng.normal(scale=50, size=(4, 6)))
        value = float(classification_loss(logits, torch.tensor([0, 1, 2, 3])))
        assert math.isfinite(value)


class TestTotalGanLoss:
    def test_all_zero_parts(self):
        gen, disc = total_gan_loss(GanLossParts())
        assert float(gen) == 0.0 and float(disc) == 0.0

    def test_only_l2_passes_through(self):
        gen, _ = total_gan_loss(GanLossParts(l2=0.37))
        assert float(gen) == pytest.approx(0.37, abs=0)

    def test_linear_in_weights(self, rng):
        parts = GanLossParts(
            adversarial=float(rng.normal()),
            generator_adversarial=float(rng.normal()),
            l2=float(rng.uniform()),
            classification_real=float(rng.uniform()),
            classification_generated=float(rng.uniform()),
        )
        base_gen, base_disc = total_gan_loss(parts, GanLossWeights(l2=0.0))
        boosted_gen, boosted_disc = total_gan_loss(parts, GanLossWeights(l2=10.0))
        assert float(boosted_gen) - float(base_gen) == pytest.approx(10.0 * parts.l2, abs=0)
        assert float(boosted_disc) == pytest.approx(float(base_disc), abs=0)
        # exact scaling of each weight
        for w in (0.0, 0.5, 2.0):
            gen, disc = total_gan_loss(parts, GanLossWeights(adversarial=w, l2=w, classification=w))
            expected_gen = w * parts.generator_adversarial + w * parts.l2 + w * parts.classification_generated
            expected_disc = -w * parts.adversarial + w * parts.classification_real
            assert float(gen) == pytest.approx(expected_gen, abs=1e-15)
            assert float(disc) == pytest.approx(expected_disc, abs=1e-15)

    def test_discriminator_combines_adversarial_and_identity(self):
        _, disc = total_gan_loss(GanLossParts(adversarial=-1.2, classification_real=0.3))
        assert float(disc) == pytest.approx(1.5, abs=1e-12)
