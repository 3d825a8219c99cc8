import math

import numpy as np
import pytest
import torch

from crossreid.losses import (
    LossError,
    LossReport,
    LossWeights,
    adv_feature_loss,
    adv_image_loss,
    consist_loss,
    id_loss,
    rec_loss,
    total_loss,
    triplet_loss,
)

LN2 = math.log(2.0)


def t(x, dtype=torch.float64):
    return torch.as_tensor(x, dtype=dtype)


# ---------------------------------------------------------------------------
# Feature-level adversarial loss
# ---------------------------------------------------------------------------

class TestAdvFeature:
    def test_half_probs_single_level(self):
        probs = t([0.5, 0.5])
        d, g = adv_feature_loss({1: probs}, {1: probs})
        assert abs(float(d) - 2 * LN2) < 1e-9
        assert abs(float(g) - LN2) < 1e-9

    def test_perfect_discriminator_limits(self):
        eps = 1e-7
        d, g = adv_feature_loss({1: t([1.0 - eps])}, {1: t([eps])})
        assert float(d) < 1e-5
        assert float(g) > 10.0  # -ln(eps) is large

    def test_additive_over_levels(self):
        rng = np.random.default_rng(0)
        ph, pl = t(rng.uniform(0.1, 0.9, 5)), t(rng.uniform(0.1, 0.9, 5))
        d1, g1 = adv_feature_loss({1: ph}, {1: pl})
        d2, g2 = adv_feature_loss({1: ph, 2: ph.clone()}, {1: pl, 2: pl.clone()})
        assert abs(float(d2) - 2 * float(d1)) < 1e-12
        assert abs(float(g2) - 2 * float(g1)) < 1e-12

    def test_level_set_must_match(self):
        with pytest.raises(LossError):
            adv_feature_loss({}, {})
        with pytest.raises(LossError):
            adv_feature_loss({1: t([0.5])}, {2: t([0.5])})

    def test_out_of_range_probability_rejected(self):
        with pytest.raises(LossError):
            adv_feature_loss({1: t([1.5])}, {1: t([0.5])})


# ---------------------------------------------------------------------------
# Image-level adversarial loss
# ---------------------------------------------------------------------------

class TestAdvImage:
    def test_all_half_gives_four_ln2(self):
        p = t([0.5, 0.5, 0.5])
        d, g = adv_image_loss(p, p, p)
        assert abs(float(d) - 4 * LN2) < 1e-9
        assert abs(float(g) - 2 * LN2) < 1e-9

    def test_perfect_discriminator_limit(self):
        eps = 1e-7
        d, _ = adv_image_loss(t([1.0 - eps]), t([eps]), t([eps]))
        assert float(d) < 1e-5

    def test_single_sample_hand_arithmetic(self):
        pr, pl, ph = 0.8, 0.3, 0.4
        d, g = adv_image_loss(t([pr]), t([pl]), t([ph]))
        d_hand = -(2 * math.log(pr) + math.log(1 - pl) + math.log(1 - ph))
        g_hand = -(math.log(pl) + math.log(ph))
        assert abs(float(d) - d_hand) < 1e-12
        assert abs(float(g) - g_hand) < 1e-12

    def test_dedup_real_switch(self):
        pr, pl, ph = 0.8, 0.3, 0.4
        d, _ = adv_image_loss(t([pr]), t([pl]), t([ph]), dedup_real=True)
        d_hand = -(math.log(pr) + math.log(1 - pl) + math.log(1 - ph))
        assert abs(float(d) - d_hand) < 1e-12


# ---------------------------------------------------------------------------
# Reconstruction loss
# ---------------------------------------------------------------------------

class TestRecLoss:
    def test_exact_reconstruction_is_zero(self):
        truth = t(np.random.default_rng(0).uniform(size=(2, 4, 4, 3)))
        assert float(rec_loss(truth, truth.clone(), truth)) == 0.0

    def test_constant_offset(self):
        truth = t(np.full((2, 4, 4, 3), 0.5))
        off = truth + 0.1
        assert abs(float(rec_loss(off, truth.clone(), truth)) - 0.1) < 1e-12

    def test_against_elementwise_oracle(self):
        rng = np.random.default_rng(1)
        a, b, truth_h, truth_l = (rng.uniform(size=(3, 5, 5, 3)) for _ in range(4))
        got = float(rec_loss(t(a), t(b), t(truth_h), t(truth_l)))
        oracle = np.abs(a - truth_h).mean() + np.abs(b - truth_l).mean()
        assert abs(got - oracle) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(LossError):
            rec_loss(t(np.zeros((2, 4, 4, 3))), t(np.zeros((2, 4, 4, 3))),
                     t(np.zeros((2, 5, 4, 3))))


# ---------------------------------------------------------------------------
# Consistency loss
# ---------------------------------------------------------------------------

class TestConsistLoss:
    def test_identical_maps_zero(self):
        g = t(np.random.default_rng(0).uniform(size=(2, 8, 2, 2)))
        assert float(consist_loss(g, g.clone())) == 0.0

    def test_constant_shift_per_branch(self):
        g = t(np.zeros((2, 4, 2, 2)))
        assert abs(float(consist_loss(g + 0.25, g)) - 0.25) < 1e-12
        two = consist_loss(g + 0.25, g, g + 0.5, g)
        assert abs(float(two) - 0.75) < 1e-12

    def test_against_elementwise_oracle(self):
        rng = np.random.default_rng(2)
        gt, gh = rng.uniform(size=(2, 3, 4, 4)), rng.uniform(size=(2, 3, 4, 4))
        got = float(consist_loss(t(gt), t(gh)))
        assert abs(got - np.abs(gt - gh).mean()) < 1e-12

    def test_target_detached(self):
        g_tilde = t(np.ones((1, 2, 2, 2))).requires_grad_(True)
        g_truth = t(np.zeros((1, 2, 2, 2))).requires_grad_(True)
        consist_loss(g_tilde, g_truth).backward()
        assert g_tilde.grad is not None and g_tilde.grad.abs().sum() > 0
        assert g_truth.grad is None or g_truth.grad.abs().sum() == 0


# ---------------------------------------------------------------------------
# Identity loss
# ---------------------------------------------------------------------------

class TestIdLoss:
    def test_uniform_logits_twenty_classes(self):
        logits = torch.zeros(4, 20, dtype=torch.float64)
        labels = torch.tensor([0, 5, 7, 19])
        mask = torch.ones(4, dtype=torch.bool)
        assert abs(float(id_loss(logits, labels, mask)) - math.log(20)) < 1e-9

    def test_confident_correct_goes_to_zero(self):
        logits = torch.full((2, 5), 0.0, dtype=torch.float64)
        logits[0, 2] = 60.0
        logits[1, 4] = 60.0
        labels = torch.tensor([2, 4])
        mask = torch.ones(2, dtype=torch.bool)
        assert float(id_loss(logits, labels, mask)) < 1e-6

    def test_empty_mask_returns_zero_with_zero_grad(self):
        logits = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
        out = id_loss(logits, torch.tensor([0, 1, 2]), torch.zeros(3, dtype=torch.bool))
        assert float(out) == 0.0
        out.backward()
        assert logits.grad.abs().sum() == 0.0

    def test_mask_equivalence(self):
        rng = np.random.default_rng(3)
        logits = t(rng.normal(size=(6, 5)))
        labels = torch.tensor([0, 1, 2, 3, 4, 0])
        mask = torch.tensor([True, False, True, True, False, True])
        full = float(id_loss(logits, labels, mask))
        sub = float(id_loss(logits[mask], labels[mask], torch.ones(4, dtype=torch.bool)))
        assert abs(full - sub) < 1e-12

    def test_label_out_of_range(self):
        with pytest.raises(LossError):
            id_loss(torch.zeros(2, 3), torch.tensor([0, 3]), torch.ones(2, dtype=torch.bool))


# ---------------------------------------------------------------------------
# Triplet loss
# ---------------------------------------------------------------------------

def brute_force_batch_hard(u: np.ndarray, labels: np.ndarray, margin: float) -> float:
    """All-combinations oracle: for every anchor enumerate every positive and
    negative pair, take hardest of each, hinge, average."""
    n = len(labels)
    hinges = []
    for a in range(n):
        d_pos = None
        d_neg = None
        for p in range(n):
            if p != a and labels[p] == labels[a]:
                d = float(np.sqrt(((u[a] - u[p]) ** 2).sum()))
                d_pos = d if d_pos is None else max(d_pos, d)
        for g in range(n):
            if labels[g] != labels[a]:
                d = float(np.sqrt(((u[a] - u[g]) ** 2).sum()))
                d_neg = d if d_neg is None else min(d_neg, d)
        assert d_pos is not None and d_neg is not None
        hinges.append(max(0.0, margin + d_pos - d_neg))
    return float(np.mean(hinges))


class TestTripletLoss:
    def test_well_separated_clusters_zero(self):
        u = t([[0.0, 0.0], [0.0, 0.0], [10.0, 0.0], [10.0, 0.0]])
        labels = torch.tensor([0, 0, 1, 1])
        assert float(triplet_loss(u, labels, margin=2.0)) == 0.0

    def test_hinge_value_three(self):
        # every anchor: d_pos = 3, d_neg = 2 -> hinge = 2 + 3 - 2 = 3
        u = t([[0.0, 0.0], [3.0, 0.0], [0.0, 2.0], [3.0, 2.0]])
        labels = torch.tensor([0, 0, 1, 1])
        assert abs(float(triplet_loss(u, labels, margin=2.0)) - 3.0) < 1e-9

    def test_six_point_batch_vs_oracle(self):
        rng = np.random.default_rng(4)
        u = rng.normal(size=(6, 3))
        labels = np.array([0, 0, 1, 1, 2, 2])
        got = float(triplet_loss(t(u), torch.from_numpy(labels), margin=2.0))
        assert abs(got - brute_force_batch_hard(u, labels, 2.0)) < 1e-9

    def test_rigid_rotation_invariance(self):
        rng = np.random.default_rng(5)
        u = rng.normal(size=(8, 4))
        labels = torch.tensor([0, 0, 1, 1, 2, 2, 3, 3])
        q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
        base = float(triplet_loss(t(u), labels, margin=2.0))
        rotated = float(triplet_loss(t(u @ q), labels, margin=2.0))
        assert abs(base - rotated) < 1e-9

    def test_scaling_preserves_active_set_at_zero_margin(self):
        rng = np.random.default_rng(6)
        u = rng.normal(size=(8, 4))
        labels = torch.tensor([0, 0, 1, 1, 2, 2, 3, 3])
        base = float(triplet_loss(t(u), labels, margin=0.0))
        scaled = float(triplet_loss(t(3.0 * u), labels, margin=0.0))
        assert abs(scaled - 3.0 * base) < 1e-9

    def test_strict_pk_violation(self):
        u = t([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
        with pytest.raises(LossError):
            triplet_loss(u, torch.tensor([0, 0, 1]), margin=2.0, strict=True)

    def test_non_strict_degenerate_returns_zero(self):
        u = t([[0.0, 0.0], [1.0, 0.0]])
        out = triplet_loss(u, torch.tensor([0, 0]), margin=2.0, strict=False)
        assert float(out) == 0.0


# ---------------------------------------------------------------------------
# Total loss / report
# ---------------------------------------------------------------------------

class TestTotalLoss:
    def test_zero_weights_reduce_to_cls(self):
        w = LossWeights(adv_f=0, rec=0, adv_i=0, consist=0)
        report = total_loss({}, 1.0, 1.0, 1.0, 1.0, 0.25, 0.5, w)
        assert report.cls == 0.75
        assert report.total == 0.75

    def test_unit_terms_sum_to_five(self):
        w = LossWeights()
        report = total_loss({1: 1.0}, 1.0, 1.0, 1.0, 1.0, 0.5, 0.5, w)
        assert abs(report.total - 5.0) < 1e-12

    def test_random_report_resummed_by_oracle(self):
        rng = np.random.default_rng(7)
        vals = rng.uniform(0.1, 2.0, size=6)
        w = LossWeights(adv_f=0.3, rec=1.7, adv_i=0.9, consist=0.4)
        report = total_loss({1: vals[0]}, *vals, w)
        oracle = (vals[4] + vals[5]) + 0.3 * vals[0] + 1.7 * vals[1] + 0.9 * vals[2] + 0.4 * vals[3]
        assert abs(report.total - oracle) < 1e-12
        assert report.cls == vals[4] + vals[5]

    def test_negative_weight_rejected(self):
        with pytest.raises(LossError):
            LossWeights(rec=-0.1)

    def test_nonfinite_report_rejected(self):
        with pytest.raises(LossError):
            total_loss({}, float("nan"), 0, 0, 0, 0, 0, LossWeights())

    def test_csv_row_shape(self):
        report = total_loss({}, 1, 2, 3, 4, 5, 6, LossWeights())
        row = report.csv_row(12)
        assert row.startswith("12,")
        assert len(row.split(",")) == len(LossReport.CSV_HEADER.split(","))


# ---------------------------------------------------------------------------
# Generator losses bounded below after clamping
# ---------------------------------------------------------------------------

def test_generator_losses_nonnegative():
    rng = np.random.default_rng(8)
    for _ in range(20):
        probs = t(rng.uniform(0.0, 1.0, size=4))
        _, g_f = adv_feature_loss({1: probs}, {1: probs.clone()})
        _, g_i = adv_image_loss(probs, probs.clone(), probs.clone())
        assert float(g_f) >= 0.0
        assert float(g_i) >= 0.0
