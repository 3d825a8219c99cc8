"""Training objectives as pure differentiable functions.

Conventions: discriminators minimize their d_loss (the negated classic
minimax objective); generator-side losses use the non-saturating
-log D(fake) form.  Probabilities are clamped to [eps, 1-eps] before logs
so no term can reach -inf.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import torch
import torch.nn.functional as F_t

EPS = 1e-7


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    """Relative weights of the non-classification terms (the classification
    loss enters with implicit weight 1) plus the triplet margin."""

    adv_f: float = 1.0
    rec: float = 1.0
    adv_i: float = 1.0
    consist: float = 1.0
    margin: float = 2.0
    dedup_image_real: bool = False

    def __post_init__(self):
        for name in ("adv_f", "rec", "adv_i", "consist"):
            if getattr(self, name) < 0:
                raise LossError(f"loss weight {name} must be >= 0")


@dataclass
class LossReport:
    """Per-term values for one training step.

    adv_f / adv_i are the generator-side values that enter the total; the
    discriminator-side values are kept in d_f / d_i for logging.
    """

    adv_f_per_level: dict[int, float] = field(default_factory=dict)
    adv_f: float = 0.0
    rec: float = 0.0
    adv_i: float = 0.0
    consist: float = 0.0
    id: float = 0.0
    tri: float = 0.0
    cls: float = 0.0
    total: float = 0.0
    d_f: float = 0.0
    d_i: float = 0.0

    CSV_HEADER = "iter,adv_F,rec,adv_I,consist,id,tri,total"

    def csv_row(self, iteration: int) -> str:
        vals = [self.adv_f, self.rec, self.adv_i, self.consist, self.id, self.tri, self.total]
        return f"{iteration}," + ",".join(f"{v:.6f}" for v in vals)

    def validate(self):
        vals = [self.adv_f, self.rec, self.adv_i, self.consist,
                self.id, self.tri, self.cls, self.total, self.d_f, self.d_i]
        if not all(math.isfinite(v) for v in vals):
            raise LossError(f"non-finite loss values: {self}")
        return self


def _clamped_log(p: torch.Tensor) -> torch.Tensor:
    if p.min() < 0 or p.max() > 1:
        raise LossError("discriminator output outside [0, 1]; upstream numeric failure")
    return torch.log(p.clamp(EPS, 1.0 - EPS))


def adv_feature_loss(
    d_outputs_hr: Mapping[int, torch.Tensor],
    d_outputs_lr: Mapping[int, torch.Tensor],
) -> tuple[torch.Tensor, torch.Tensor]:
    """Multi-scale feature-level adversarial loss, additive over levels.

    d_loss: the discriminators push HR-derived feature maps toward 1 and
    LR-derived maps toward 0.  g_loss: the encoder makes LR feature maps
    look HR (non-saturating form).
    """
    if not d_outputs_hr or set(d_outputs_hr) != set(d_outputs_lr):
        raise LossError("HR/LR discriminator outputs must cover the same non-empty level set")
    d_loss = 0.0
    g_loss = 0.0
    for j in sorted(d_outputs_hr):
        d_loss = d_loss - (_clamped_log(d_outputs_hr[j]).mean()
                           + _clamped_log(1.0 - d_outputs_lr[j]).mean())
        g_loss = g_loss - _clamped_log(d_outputs_lr[j]).mean()
    return d_loss, g_loss


def adv_image_loss(
    d_real: torch.Tensor,
    d_fake_from_lr: torch.Tensor,
    d_fake_from_hr: torch.Tensor,
    dedup_real: bool = False,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Image-level adversarial loss over recovered vs. ground-truth images.

    The real term appears once per fake branch (weight 2) by default;
    dedup_real=True collapses it to a single appearance.
    """
    real_weight = 1.0 if dedup_real else 2.0
    d_loss = -(real_weight * _clamped_log(d_real).mean()
               + _clamped_log(1.0 - d_fake_from_lr).mean()
               + _clamped_log(1.0 - d_fake_from_hr).mean())
    g_loss = -(_clamped_log(d_fake_from_lr).mean() + _clamped_log(d_fake_from_hr).mean())
    return d_loss, g_loss


def rec_loss(
    rec_from_hr: torch.Tensor,
    rec_from_lr: torch.Tensor,
    truth_hr: torch.Tensor,
    truth_lr: torch.Tensor | None = None,
) -> torch.Tensor:
    """l1 reconstruction toward the HR ground truth, summed over the HR- and
    LR-input branches.  truth_lr defaults to truth_hr; with independently
    shuffled streams it is the per-sample provenance HR image."""
    if truth_lr is None:
        truth_lr = truth_hr
    if rec_from_hr.shape != truth_hr.shape or rec_from_lr.shape != truth_lr.shape:
        raise LossError("reconstruction/target shape mismatch")
    return (rec_from_hr - truth_hr).abs().mean() + (rec_from_lr - truth_lr).abs().mean()


def consist_loss(
    g_tilde_hr: torch.Tensor,
    g_hr: torch.Tensor,
    g_tilde_lr: torch.Tensor | None = None,
    g_lr: torch.Tensor | None = None,
) -> torch.Tensor:
    """l1 consistency between re-encoded recovered images and re-encoded
    ground truth, summed over branches.  Targets are detached: no gradient
    flows through the ground-truth branch, which would otherwise admit the
    degenerate solution of collapsing the HR encoder."""
    if g_tilde_hr.shape != g_hr.shape:
        raise LossError("consistency shape mismatch")
    total = (g_tilde_hr - g_hr.detach()).abs().mean()
    if g_tilde_lr is not None:
        if g_lr is None or g_tilde_lr.shape != g_lr.shape:
            raise LossError("consistency shape mismatch on LR branch")
        total = total + (g_tilde_lr - g_lr.detach()).abs().mean()
    return total


def id_loss(logits: torch.Tensor, labels: torch.Tensor, labeled_mask: torch.Tensor) -> torch.Tensor:
    """Softmax cross entropy averaged over labeled samples; 0 when none are
    labeled (the semi-supervised k=0 regime)."""
    if labeled_mask.dtype != torch.bool:
        labeled_mask = labeled_mask.bool()
    if not labeled_mask.any():
        return logits.sum() * 0.0
    sel_logits = logits[labeled_mask]
    sel_labels = labels[labeled_mask]
    if sel_labels.min() < 0 or sel_labels.max() >= logits.shape[1]:
        raise LossError("label outside classifier range")
    return F_t.cross_entropy(sel_logits, sel_labels)


def _pairwise_dist(u: torch.Tensor) -> torch.Tensor:
    diff = u[:, None, :] - u[None, :, :]
    # +1e-24 vanishes at any nonzero distance but keeps sqrt' finite when two
    # embeddings coincide (replacement sampling can duplicate rows).
    return (diff.pow(2).sum(-1) + 1e-24).sqrt()


def triplet_loss(
    u: torch.Tensor,
    labels: torch.Tensor,
    margin: float,
    strict: bool = True,
) -> torch.Tensor:
    """Batch-hard triplet loss on Euclidean distances.

    Per anchor: hardest positive = max distance over same-label samples
    (anchor excluded), hardest negative = min distance over other labels;
    hinge at the margin, averaged over anchors.

    strict=True enforces the PK precondition (every anchor must have a
    positive and a negative); strict=False averages over valid anchors and
    returns 0 when there are none, which is how the labeled sub-batch is
    treated in semi-supervised training.
    """
    if u.dim() != 2 or labels.shape[0] != u.shape[0]:
        raise LossError("embeddings must be (B, dim) with one label per row")
    n = u.shape[0]
    same = labels[:, None] == labels[None, :]
    eye = torch.eye(n, dtype=torch.bool, device=u.device)
    pos_mask = same & ~eye
    neg_mask = ~same
    valid = pos_mask.any(dim=1) & neg_mask.any(dim=1)
    if strict and (n < 4 or not valid.all()):
        raise LossError("batch violates the PK precondition (>=2 identities with >=2 samples)")
    if not valid.any():
        return u.sum() * 0.0
    dist = _pairwise_dist(u)
    d_pos = torch.where(pos_mask, dist, dist.new_tensor(-1.0)).max(dim=1).values
    d_neg = torch.where(neg_mask, dist, dist.new_tensor(float("inf"))).min(dim=1).values
    hinge = (margin + d_pos - d_neg).clamp_min(0.0)
    return hinge[valid].mean()


def total_loss(
    adv_f_per_level: Mapping[int, float],
    adv_f: torch.Tensor | float,
    rec: torch.Tensor | float,
    adv_i: torch.Tensor | float,
    consist: torch.Tensor | float,
    id_term: torch.Tensor | float,
    tri: torch.Tensor | float,
    weights: LossWeights,
    d_f: float = 0.0,
    d_i: float = 0.0,
) -> LossReport:
    """Combine per-term values into the full objective and a LossReport:
    total = (id + tri) + sum of weighted adversarial/reconstruction/
    consistency terms."""
    fv = lambda t: float(t)
    cls = fv(id_term) + fv(tri)
    total = (cls + weights.adv_f * fv(adv_f) + weights.rec * fv(rec)
             + weights.adv_i * fv(adv_i) + weights.consist * fv(consist))
    return LossReport(
        adv_f_per_level={int(j): float(v) for j, v in adv_f_per_level.items()},
        adv_f=fv(adv_f), rec=fv(rec), adv_i=fv(adv_i), consist=fv(consist),
        id=fv(id_term), tri=fv(tri), cls=cls, total=total,
        d_f=float(d_f), d_i=float(d_i),
    ).validate()
