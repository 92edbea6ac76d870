import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from stylediff.losses import (LossWeights, adversarial_loss, discriminator_loss,
                              feature_matching_loss, generator_total_loss,
                              mel_reconstruction_loss, variance_loss)

finite = st.floats(-10, 10, allow_nan=False)


class TestDiscriminatorLoss:
    @pytest.mark.parametrize("real,fake,expected", [(1, 0, 0.0), (0, 1, 2.0), (0.5, 0.5, 0.5)])
    def test_values(self, real, fake, expected):
        assert discriminator_loss(real, fake) == pytest.approx(expected)

    def test_grid_minimizer(self):
        d = np.round(np.arange(0, 10001) * 1e-4, 10)
        values = discriminator_loss(d, d)
        assert abs(d[np.argmin(values)] - 0.5) <= 1e-3
        assert values.min() == pytest.approx(0.5)

    def test_batch_mean(self):
        v = discriminator_loss(torch.tensor([1.0, 0.0]), torch.tensor([0.0, 0.0]))
        assert v.item() == pytest.approx(0.5)

    @given(finite, finite)
    def test_nonnegative(self, a, b):
        assert discriminator_loss(a, b) >= 0


class TestAdversarial:
    @pytest.mark.parametrize("fake,expected", [(1, 0.0), (0, 1.0), (0.5, 0.25)])
    def test_values(self, fake, expected):
        assert adversarial_loss(fake) == pytest.approx(expected)


class TestFeatureMatching:
    def test_identical(self):
        feats = [torch.randn(2, 3, 5), torch.randn(2, 1, 2)]
        assert feature_matching_loss(feats, [f.clone() for f in feats]).item() == 0.0

    def test_single_element(self):
        assert feature_matching_loss([torch.tensor([2.0])], [torch.tensor([5.0])]).item() == 3.0

    def test_two_layer_sum(self):
        real = [torch.zeros(1, 2, 2), torch.zeros(1, 1, 4)]
        fake = [torch.ones(1, 2, 2), torch.tensor([[[1.0, 0.0, 1.0, 0.0]]])]
        assert feature_matching_loss(real, fake).item() == pytest.approx(1.5)

    def test_mask(self):
        real = [torch.zeros(1, 1, 4)]
        fake = [torch.tensor([[[1.0, 1.0, 9.0, 9.0]]])]
        mask = [torch.tensor([[True, True, False, False]])]
        assert feature_matching_loss(real, fake, mask).item() == 1.0

    def test_mismatch(self):
        with pytest.raises(ValueError):
            feature_matching_loss([torch.zeros(1)], [])
        with pytest.raises(ValueError):
            feature_matching_loss([torch.zeros(2)], [torch.zeros(3)])


class TestVarianceLoss:
    def test_identity(self):
        d = torch.tensor([[2, 5, 1]])
        p, e = torch.randn(1, 8), torch.randn(1, 8)
        out = variance_loss(torch.log1p(d.float()), p, e, d, p, e)
        assert [x.item() for x in out] == [0.0, 0.0, 0.0]

    def test_duration_offset(self):
        d = torch.tensor([[2, 5, 1]])
        delta = 0.3
        l_dur, _, _ = variance_loss(torch.log1p(d.double()) + delta, torch.zeros(1, 2),
                                    torch.zeros(1, 2), d, torch.zeros(1, 2), torch.zeros(1, 2))
        assert l_dur.item() == pytest.approx(delta ** 2)

    def test_pitch_off_by_one(self):
        _, l_pitch, _ = variance_loss(torch.zeros(1, 1), torch.tensor([[1.0, -1.0]]),
                                      torch.zeros(1, 2), torch.zeros(1, 1),
                                      torch.zeros(1, 2), torch.zeros(1, 2))
        assert l_pitch.item() == 1.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            variance_loss(torch.zeros(1, 2), torch.zeros(1, 3), torch.zeros(1, 3),
                          torch.zeros(1, 2), torch.zeros(1, 4), torch.zeros(1, 3))


class TestMelLoss:
    def test_values(self):
        x = torch.randn(6, 80)
        assert mel_reconstruction_loss(x, x.clone()).item() == 0.0
        assert mel_reconstruction_loss(torch.zeros(3, 4), torch.ones(3, 4)).item() == 1.0
        assert mel_reconstruction_loss(torch.tensor([[0.0, 0.0], [0.0, 4.0]]),
                                       torch.zeros(2, 2)).item() == 1.0

    def test_mask(self):
        pred = torch.tensor([[[1.0, 1.0], [7.0, 7.0]]])
        mask = torch.tensor([[True, False]])
        assert mel_reconstruction_loss(pred, torch.zeros(1, 2, 2), mask).item() == 1.0

    def test_shape(self):
        with pytest.raises(ValueError):
            mel_reconstruction_loss(torch.zeros(2, 3), torch.zeros(3, 2))


class TestTotal:
    PARTS = {"adv": 0.25, "duration": 0.4, "energy": 0.3, "pitch": 0.2, "fm": 1.5, "mel": 0.7}

    def test_zero_weights(self):
        w = LossWeights(0, 0, 0, 0, 0)
        assert generator_total_loss(self.PARTS, w) == 0.25

    def test_hand_sum(self):
        w = LossWeights(0, 0, 0, 2.0, 0)
        assert generator_total_loss(self.PARTS, w) == pytest.approx(3.25)

    def test_linearity(self):
        w = LossWeights()
        rest = generator_total_loss(self.PARTS, w) - 0.25
        assert generator_total_loss(self.PARTS, w.scaled(2)) - 0.25 == pytest.approx(2 * rest)

    @pytest.mark.parametrize("bad", [-1.0, math.inf, math.nan])
    def test_invalid_weights(self, bad):
        with pytest.raises(ValueError):
            LossWeights(lambda_fm=bad)

    def test_defaults(self):
        w = LossWeights()
        assert (w.lambda_duration, w.lambda_pitch, w.lambda_energy, w.lambda_fm, w.lambda_mel) == \
            (0.1, 0.1, 0.1, 2.0, 1.0)

    @settings(max_examples=50)
    @given(st.lists(st.floats(0, 5), min_size=6, max_size=6))
    def test_nonnegative(self, vals):
        parts = dict(zip(self.PARTS, vals))
        assert generator_total_loss(parts, LossWeights()) >= 0
