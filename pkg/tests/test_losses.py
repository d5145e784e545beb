import math

import numpy as np
import pytest
import torch

import _oracles as oracles
from mrsynth import losses
from mrsynth.discriminator import DiscriminatorSet, PatchResponse
from mrsynth.losses import (
    LossReport,
    LossWeights,
    confidence_map_loss,
    adversarial_losses,
    discriminator_adversarial_loss,
    feature_matching_loss,
    generalized_dice_loss,
    generator_adversarial_loss,
    l1_sum,
    multiclass_generalized_dice_loss,
    paired_objective,
    shape_consistency_loss,
    unpaired_objective,
)


def t(x, dtype=torch.float64):
    return torch.as_tensor(np.asarray(x), dtype=dtype)


class TestConfidenceMapLoss:
    def test_zero_at_perfect(self):
        y = t(np.random.default_rng(0).uniform(0, 1, (1, 2, 4, 4)))
        c = torch.ones_like(y)
        assert float(confidence_map_loss(y, c, y, 0.1)) == pytest.approx(0.0)

    def test_single_pixel_value(self):
        # c=0.5, |err|=0.2, lam=0.1 -> 0.5*0.2 - 0.1*ln(0.5) = 0.16931
        v = confidence_map_loss(t([[[[0.2]]]]), t([[[[0.5]]]]), t([[[[0.4]]]]), 0.1)
        assert float(v) == pytest.approx(0.5 * 0.2 - 0.1 * math.log(0.5), abs=1e-9)

    def test_diverges_as_conf_vanishes(self):
        # -lam*log(c) grows without bound as c -> 0+
        y = t([[[[0.3]]]])
        prev = None
        for c in (1e-2, 1e-8, 1e-30, 1e-300):
            v = float(confidence_map_loss(y, t([[[[c]]]]), y, 0.1))
            if prev is not None:
                assert v > prev
            prev = v
        assert prev > 60.0

    def test_conf_out_of_range(self):
        y = t([[[[0.5]]]])
        with pytest.raises(ValueError, match=r"\(0,1\]"):
            confidence_map_loss(y, t([[[[0.0]]]]), y, 0.1)
        with pytest.raises(ValueError, match=r"\(0,1\]"):
            confidence_map_loss(y, t([[[[1.5]]]]), y, 0.1)

    def test_gradient_matches_finite_differences(self, rng):
        yh = t(rng.uniform(0.1, 0.9, (1, 1, 8, 8)))
        yh.requires_grad_(True)
        c_raw = t(rng.uniform(-1, 1, (1, 1, 8, 8)))
        c_raw.requires_grad_(True)
        y = t(rng.uniform(0.1, 0.9, (1, 1, 8, 8)))
        lam = 0.1

        def f(yh_, craw_):
            return confidence_map_loss(yh_, torch.sigmoid(craw_), y, lam)

        loss = f(yh, c_raw)
        loss.backward()
        eps = 1e-6
        for leaf in (yh, c_raw):
            g = leaf.grad.clone()
            flat = leaf.detach().clone().reshape(-1)
            idxs = rng.choice(flat.numel(), size=12, replace=False)
            for i in idxs:
                for sign, store in ((1, "hi"), (-1, "lo")):
                    pert = leaf.detach().clone().reshape(-1)
                    pert[i] += sign * eps
                    pert = pert.reshape(leaf.shape)
                    args = (pert, c_raw.detach()) if leaf is yh else (yh.detach(), pert)
                    if store == "hi":
                        hi = float(f(*args))
                    else:
                        lo = float(f(*args))
                fd = (hi - lo) / (2 * eps)
                an = float(g.reshape(-1)[i])
                assert abs(fd - an) / max(abs(fd), abs(an), 1e-8) < 1e-4


class TestL1Sum:
    def test_uniform_offset(self):
        a = torch.zeros(2, 1, 4, 4)
        b = torch.full((2, 1, 4, 4), 0.1)
        assert float(l1_sum(a, b)) == pytest.approx(0.1 * 16, abs=1e-6)

    def test_matches_oracle(self, rng):
        a = rng.uniform(0, 1, (3, 2, 5, 5))
        b = rng.uniform(0, 1, (3, 2, 5, 5))
        assert float(l1_sum(t(a), t(b))) == pytest.approx(
            oracles.l1_sum_naive(a, b), abs=1e-9)


class TestGeneralizedDice:
    def test_perfect_overlap(self):
        r = t(np.array([[1.0, 0.0], [1.0, 0.0]]))
        assert float(generalized_dice_loss(r, r)) == pytest.approx(0.0)

    def test_disjoint(self):
        r = t(np.array([1.0, 1.0, 0.0, 0.0]))
        s = t(np.array([0.0, 0.0, 1.0, 1.0]))
        assert float(generalized_dice_loss(r, s)) == pytest.approx(1.0)

    def test_half_overlap(self):
        r = t(np.array([1, 1, 1, 1, 0, 0], dtype=float))
        s = t(np.array([1, 1, 0, 0, 1, 1], dtype=float))
        assert float(generalized_dice_loss(r, s)) == pytest.approx(0.5)

    def test_both_empty(self):
        z = torch.zeros(4, 4, dtype=torch.float64)
        assert float(generalized_dice_loss(z, z)) == 0.0

    def test_symmetric_and_bounded(self, rng):
        for _ in range(30):
            r = t(rng.uniform(0, 1, (6, 6)))
            s = t(rng.uniform(0, 1, (6, 6)))
            a = float(generalized_dice_loss(r, s))
            b = float(generalized_dice_loss(s, r))
            assert a == pytest.approx(b, abs=1e-12)
            assert 0.0 <= a <= 1.0

    def test_range_validation(self):
        with pytest.raises(ValueError, match=r"\[0,1\]"):
            generalized_dice_loss(t([1.5]), t([0.5]))

    def test_gradient_matches_finite_differences(self, rng):
        r = t(rng.uniform(0.05, 0.95, (8, 8)))
        s_leaf = t(rng.uniform(0.05, 0.95, (8, 8)))
        s_leaf.requires_grad_(True)
        generalized_dice_loss(r, s_leaf).backward()
        eps = 1e-6
        for i in rng.choice(64, size=12, replace=False):
            hi = s_leaf.detach().clone().reshape(-1)
            hi[i] += eps
            lo = s_leaf.detach().clone().reshape(-1)
            lo[i] -= eps
            fd = (float(generalized_dice_loss(r, hi.reshape(8, 8)))
                  - float(generalized_dice_loss(r, lo.reshape(8, 8)))) / (2 * eps)
            an = float(s_leaf.grad.reshape(-1)[i])
            assert abs(fd - an) / max(abs(fd), abs(an), 1e-8) < 1e-4

    def test_multiclass_matches_oracle(self, rng):
        r = rng.uniform(0, 1, (3, 5, 5))
        s = rng.uniform(0, 1, (3, 5, 5))
        ours = float(multiclass_generalized_dice_loss(t(r), t(s), class_dim=0))
        assert ours == pytest.approx(oracles.multiclass_gdl_naive(r, s), abs=1e-9)


class TestFeatureMatching:
    def _resp(self, arrays):
        tensors = [t(a) for a in arrays]
        return PatchResponse(logits=tensors[-1], features=tensors)

    def test_identical_is_zero(self, rng):
        feats = [rng.uniform(-1, 1, (1, 2, 3, 3)) for _ in range(3)]
        r = self._resp(feats)
        f = self._resp(feats)
        assert float(feature_matching_loss([r], [f])) == 0.0

    def test_single_layer_value(self):
        # N=4, element-wise diff 0.5 -> (1/4) * 4 * 0.25 = 0.25
        real = self._resp([np.zeros((1, 1, 2, 2))])
        fake = self._resp([np.full((1, 1, 2, 2), 0.5)])
        assert float(feature_matching_loss([real], [fake])) == pytest.approx(0.25)

    def test_size_invariance(self):
        for n in (4, 16):
            side = int(math.sqrt(n))
            real = self._resp([np.zeros((1, 1, side, side))])
            fake = self._resp([np.full((1, 1, side, side), 0.5)])
            assert float(feature_matching_loss([real], [fake])) == pytest.approx(0.25)

    def test_misaligned_rejected(self, rng):
        a = self._resp([rng.uniform(size=(1, 1, 2, 2))])
        b = self._resp([rng.uniform(size=(1, 1, 2, 2)),
                        rng.uniform(size=(1, 1, 2, 2))])
        with pytest.raises(ValueError, match="misaligned"):
            feature_matching_loss([a], [b])

    def test_real_side_detached(self, rng):
        real_t = t(rng.uniform(size=(1, 1, 2, 2)))
        real_t.requires_grad_(True)
        fake_t = t(rng.uniform(size=(1, 1, 2, 2)))
        fake_t.requires_grad_(True)
        real = PatchResponse(logits=real_t, features=[real_t])
        fake = PatchResponse(logits=fake_t, features=[fake_t])
        feature_matching_loss([real], [fake]).backward()
        assert real_t.grad is None
        assert fake_t.grad is not None

    def test_matches_oracle(self, rng):
        real_feats = [[rng.uniform(-1, 1, (2, 2, 3, 3)) for _ in range(3)]
                      for _ in range(2)]
        fake_feats = [[rng.uniform(-1, 1, (2, 2, 3, 3)) for _ in range(3)]
                      for _ in range(2)]
        real = [self._resp(m) for m in real_feats]
        fake = [self._resp(m) for m in fake_feats]
        ours = float(feature_matching_loss(real, fake))
        assert ours == pytest.approx(oracles.fm_naive(real_feats, fake_feats),
                                     abs=1e-9)


class TestAdversarial:
    def _resp_from_logits(self, logits):
        lt = t(logits)
        return PatchResponse(logits=lt, features=[lt])

    def test_zero_logits_value(self):
        # per member: -2 ln 0.5 for d, -ln 0.5 for g; x6 members
        real = [self._resp_from_logits(np.zeros((1, 1, 2, 2))) for _ in range(6)]
        fake = [self._resp_from_logits(np.zeros((1, 1, 2, 2))) for _ in range(6)]
        d = float(discriminator_adversarial_loss(real, fake))
        g = float(generator_adversarial_loss(fake))
        assert d == pytest.approx(6 * 2 * math.log(2), abs=1e-9)
        assert g == pytest.approx(6 * math.log(2), abs=1e-9)

    def test_symmetric_lower_bound(self, rng):
        # identical real/fake responses: d >= 2 ln 2 per member
        for _ in range(20):
            resp = [self._resp_from_logits(rng.normal(0, 3, (2, 1, 3, 3)))
                    for _ in range(6)]
            d = float(discriminator_adversarial_loss(resp, resp))
            assert d >= 6 * 2 * math.log(2) - 1e-9

    def test_matches_oracle(self, rng):
        real_l = [rng.normal(0, 2, (3, 1, 2, 2)) for _ in range(6)]
        fake_l = [rng.normal(0, 2, (3, 1, 2, 2)) for _ in range(6)]
        real = [self._resp_from_logits(a) for a in real_l]
        fake = [self._resp_from_logits(a) for a in fake_l]
        g_o, d_o = oracles.adversarial_naive(real_l, fake_l)
        assert float(discriminator_adversarial_loss(real, fake)) == pytest.approx(
            d_o, abs=1e-9)
        assert float(generator_adversarial_loss(fake)) == pytest.approx(
            g_o, abs=1e-9)

    def test_roi_invariance_through_wrapper(self, torch_seed, rng):
        dset = DiscriminatorSet(6, 5, base_width=4).eval()
        x = torch.rand(1, 6, 32, 32)
        y = torch.rand(1, 5, 32, 32)
        rois = torch.zeros(1, 3, 32, 32)
        rois[:, 0, :16] = 1.0
        rois[:, 1, 16:24] = 1.0
        rois[:, 2, 24:] = 1.0
        g1, d1 = adversarial_losses(dset, x, y, y.clone(), rois)
        y2 = y.clone()
        y2[:, :, :16] += 0.3  # background rows only
        # members 3..6 (normal brain, lesion) see identical inputs
        r1 = dset.respond_all(x, y, rois)
        r2 = dset.respond_all(x, y2, rois)
        for k in range(2, 6):
            assert torch.equal(r1[k].logits, r2[k].logits)


class TestObjectives:
    def test_paired_zero_terms(self):
        rep = paired_objective(gan_g=0.0, gan_d=0.0, fm=0.0, sc=0.0, cm=0.0)
        assert rep.total == 0.0

    def test_paired_weighted_sum(self):
        rep = paired_objective(gan_g=1.0, fm=0.2, sc=0.1, cm=0.1,
                               weights=LossWeights(fm=5.0, sc=1.0, cm=1.0))
        assert rep.total == pytest.approx(2.2)

    def test_cm_ablation_removes_term(self):
        with_cm = paired_objective(gan_g=1.0, fm=0.2, sc=0.1, cm=0.1)
        without = paired_objective(gan_g=1.0, fm=0.2, sc=0.1, cm=None)
        assert with_cm.total == pytest.approx(without.total + 0.1)
        assert without.cm is None

    def test_total_recomposition(self, rng):
        w = LossWeights()
        for _ in range(10):
            vals = rng.uniform(0, 2, 4)
            rep = paired_objective(gan_g=vals[0], fm=vals[1], sc=vals[2],
                                   cm=vals[3], weights=w)
            expected = vals[0] + w.fm * vals[1] + w.sc * vals[2] + w.cm * vals[3]
            assert rep.total == pytest.approx(expected, abs=1e-9)

    def test_unpaired_total(self):
        rep = unpaired_objective(recon1=1.0, recon2=2.0, gan1_g=0.5,
                                 gan2_g=0.25, cyc1=0.125, cyc2=0.0625)
        assert rep.total == pytest.approx(3.9375)
        assert rep.gan_g == pytest.approx(0.75)

    def test_unpaired_missing_stream(self):
        with pytest.raises(ValueError, match="missing stream: cyc2"):
            unpaired_objective(recon1=1.0, recon2=1.0, gan1_g=1.0,
                               gan2_g=1.0, cyc1=1.0, cyc2=None)

    def test_report_to_dict(self):
        rep = paired_objective(gan_g=torch.tensor(1.0), fm=torch.tensor(0.5))
        d = rep.to_dict()
        assert d["gan_g"] == 1.0
        assert d["sc"] is None
        assert d["total"] == pytest.approx(3.5)
        assert d["reduction"] == losses.REDUCTION

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(fm=-1.0)


class TestShapeConsistency:
    def test_perfect_case(self):
        class Oracle(torch.nn.Module):
            def __init__(self, s):
                super().__init__()
                self.s = s

            def forward(self, y):
                return self.s

        s = torch.zeros(1, 4, 8, 8, dtype=torch.float64)
        s[:, 0] = 1.0
        s[:, 1, :2, :2] = 1.0
        s[:, 0, :2, :2] = 0.0
        y = torch.rand(1, 5, 8, 8, dtype=torch.float64)
        loss = shape_consistency_loss(Oracle(s), y, y.clone(), s)
        assert float(loss) == pytest.approx(0.0, abs=1e-12)

    def test_bounds(self, rng):
        class Fixed(torch.nn.Module):
            def __init__(self, out):
                super().__init__()
                self.out = out

            def forward(self, y):
                return self.out

        for _ in range(10):
            probs = torch.softmax(t(rng.normal(0, 1, (1, 4, 6, 6))), dim=1)
            s = torch.zeros(1, 4, 6, 6, dtype=torch.float64)
            labels = rng.integers(0, 4, (6, 6))
            for c in range(4):
                s[0, c][t(labels == c).bool()] = 1.0
            loss = float(shape_consistency_loss(Fixed(probs),
                                                torch.rand(1, 5, 6, 6),
                                                torch.rand(1, 5, 6, 6), s))
            assert 0.0 <= loss <= 2.0


class TestOracleSweep:
    """Vectorized vs naive-loop equivalence on batches of random tensors."""

    def test_cm_loss_sweep(self, rng):
        for _ in range(30):
            shape = (int(rng.integers(1, 3)), int(rng.integers(1, 3)), 4, 4)
            yh = rng.uniform(0, 1, shape)
            y = rng.uniform(0, 1, shape)
            c = rng.uniform(0.05, 1.0, shape)
            lam = float(rng.uniform(0.01, 0.2))
            ours = float(confidence_map_loss(t(yh), t(c), t(y), lam))
            assert ours == pytest.approx(
                oracles.cm_loss_naive(yh, c, y, lam), rel=1e-9)

    def test_gdl_sweep(self, rng):
        for _ in range(30):
            r = rng.uniform(0, 1, (5, 5))
            s = rng.uniform(0, 1, (5, 5))
            ours = float(generalized_dice_loss(t(r), t(s)))
            assert ours == pytest.approx(oracles.gdl_naive(r, s), abs=1e-9)
