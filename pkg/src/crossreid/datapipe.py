"""Dataset representation, LR synthesis, sampling, and the toy generator.

All randomness flows through explicit seeds / generators so every split,
batch, and generated dataset is replayable bit for bit.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DataError(ValueError):
    """Raised for invalid records, configs, or impossible splits."""


# ---------------------------------------------------------------------------
# Resampling primitives (numpy, hand-checkable)
# ---------------------------------------------------------------------------

def _box_weight_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic (n_out, n_in) matrix averaging fractional boxes.

    Output cell i covers input interval [i*s, (i+1)*s) with s = n_in/n_out;
    weights are overlap lengths normalized by s.  For integer s this is a
    plain box average.
    """
    s = n_in / n_out
    w = np.zeros((n_out, n_in), dtype=np.float64)
    for i in range(n_out):
        lo, hi = i * s, (i + 1) * s
        j0, j1 = int(np.floor(lo)), int(np.ceil(hi))
        for j in range(j0, min(j1, n_in)):
            w[i, j] = (min(j + 1, hi) - max(j, lo)) / s
    return w


def _bilinear_weight_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) bilinear interpolation weights, half-pixel centers.

    Output center i maps to source coordinate (i + 0.5) * n_in/n_out - 0.5,
    clamped to [0, n_in - 1] (the align_corners=False convention).
    """
    w = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        j0 = int(np.floor(src))
        j1 = min(j0 + 1, n_in - 1)
        t = src - j0
        w[i, j0] += 1.0 - t
        w[i, j1] += t
    return w


def box_downsample(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Area-average an H x W x C image down to out_h x out_w."""
    wr = _box_weight_matrix(img.shape[0], out_h)
    wc = _box_weight_matrix(img.shape[1], out_w)
    return np.einsum("ih,hwc,jw->ijc", wr, img.astype(np.float64), wc)


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear-resize an H x W x C image to out_h x out_w."""
    wr = _bilinear_weight_matrix(img.shape[0], out_h)
    wc = _bilinear_weight_matrix(img.shape[1], out_w)
    return np.einsum("ih,hwc,jw->ijc", wr, img.astype(np.float64), wc)


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass
class ImageRecord:
    """One identity-labeled image with camera tag and down-sampling rate.

    rate == 1 marks a native HR image.  LR records keep the HR pixels they
    were synthesized from in ``source`` so reconstruction targets and
    quality metrics can be paired by provenance.
    """

    pixels: np.ndarray
    identity: int
    camera: int
    rate: int = 1
    labeled: bool = True
    source: np.ndarray | None = None

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 3 or px.shape[2] != 3:
            raise DataError(f"pixels must be HxWx3, got {px.shape}")
        if px.size and (px.min() < 0.0 or px.max() > 1.0):
            raise DataError("pixel values must lie in [0, 1]")
        self.pixels = px
        if self.identity < 0:
            raise DataError("identity must be >= 0")
        if self.rate < 1:
            raise DataError("rate must be >= 1")

    @property
    def hr_truth(self) -> np.ndarray:
        """HR ground-truth pixels: the source for LR records, self for HR."""
        return self.pixels if self.source is None else self.source


@dataclass(frozen=True)
class DatasetConfig:
    height: int = 64
    width: int = 32
    num_identities: int = 20
    images_per_id_per_cam: int = 4
    cameras: int = 2
    seen_rates: tuple[int, ...] = (2, 3, 4)
    unseen_rates: tuple[int, ...] = (8,)
    seed: int = 0

    def __post_init__(self):
        seen, unseen = set(self.seen_rates), set(self.unseen_rates)
        if seen & unseen:
            raise DataError("seen_rates and unseen_rates must be disjoint")
        if 1 in seen | unseen:
            raise DataError("rate 1 is reserved for native HR images")
        for r in seen | unseen:
            if r < 2:
                raise DataError(f"down-sampling rate must be >= 2, got {r}")
            if self.height // r < 1 or self.width // r < 1:
                raise DataError(f"rate {r} collapses a {self.height}x{self.width} image")
        if self.num_identities < 1 or self.cameras < 1 or self.images_per_id_per_cam < 1:
            raise DataError("counts must be positive")

    def to_mapping(self) -> dict:
        return {
            "height": self.height,
            "width": self.width,
            "num_identities": self.num_identities,
            "images_per_id_per_cam": self.images_per_id_per_cam,
            "cameras": self.cameras,
            "seen_rates": self.seen_rates,
            "unseen_rates": self.unseen_rates,
            "seed": self.seed,
        }

    @classmethod
    def from_mapping(cls, m: dict) -> "DatasetConfig":
        return cls(
            height=int(m["height"]),
            width=int(m["width"]),
            num_identities=int(m["num_identities"]),
            images_per_id_per_cam=int(m["images_per_id_per_cam"]),
            cameras=int(m["cameras"]),
            seen_rates=tuple(m["seen_rates"]),
            unseen_rates=tuple(m["unseen_rates"]),
            seed=int(m["seed"]),
        )


@dataclass(frozen=True)
class BatchSpec:
    """P identities x K images per batch; P*K images per stream."""

    p: int = 4
    k: int = 2

    def __post_init__(self):
        # Both positive and negative pairs must exist for the triplet loss.
        if self.p < 2 or self.k < 2:
            raise DataError("batch needs P >= 2 identities and K >= 2 images each")

    @property
    def total(self) -> int:
        return self.p * self.k


@dataclass
class TrainSet:
    """Training pool: HR originals plus their LR syntheses at every seen rate."""

    hr_records: list[ImageRecord]
    lr_records: list[ImageRecord]
    identities: list[int]
    id_to_class: dict[int, int]

    @property
    def num_classes(self) -> int:
        return len(self.identities)

    def hr_indices_by_id(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {i: [] for i in self.identities}
        for idx, rec in enumerate(self.hr_records):
            out[rec.identity].append(idx)
        return out

    def lr_indices_by_id(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {i: [] for i in self.identities}
        for idx, rec in enumerate(self.lr_records):
            out[rec.identity].append(idx)
        return out


@dataclass
class MlrSplit:
    train: TrainSet
    query: list[ImageRecord]
    gallery: list[ImageRecord]
    lr_camera: int
    train_ids: list[int]
    test_ids: list[int]
    cfg: DatasetConfig


@dataclass
class Batch:
    """One PK batch: independently shuffled HR and LR streams.

    The LR stream keeps per-sample HR ground truth (``lr_truth``) so the
    reconstruction and consistency targets pair by provenance even though
    the two streams are not positionally aligned.
    """

    x_hr: np.ndarray          # (B, H, W, 3)
    y_hr: np.ndarray          # (B,) global identity labels
    cls_hr: np.ndarray        # (B,) contiguous class indices
    labeled_hr: np.ndarray    # (B,) bool
    x_lr: np.ndarray
    y_lr: np.ndarray
    cls_lr: np.ndarray
    labeled_lr: np.ndarray
    lr_truth: np.ndarray      # (B, H, W, 3)
    rates: np.ndarray         # (B,) rates of the LR stream


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def synthesize_lr(hr: ImageRecord, r: int) -> ImageRecord:
    """Down-sample an HR record by rate r (box average) and bilinearly
    up-sample back to the original size."""
    if hr.rate != 1:
        raise DataError(f"synthesize_lr needs an HR input, got rate={hr.rate}")
    if r < 2:
        raise DataError(f"down-sampling rate must be >= 2, got {r}")
    h, w = hr.pixels.shape[:2]
    lo_h, lo_w = max(1, h // r), max(1, w // r)
    small = box_downsample(hr.pixels, lo_h, lo_w)
    up = bilinear_resize(small, h, w)
    up = np.clip(up, 0.0, 1.0).astype(np.float32)
    return ImageRecord(
        pixels=up,
        identity=hr.identity,
        camera=hr.camera,
        rate=r,
        labeled=hr.labeled,
        source=hr.pixels,
    )


def build_mlr_split(records: list[ImageRecord], cfg: DatasetConfig) -> MlrSplit:
    """Identity-disjoint train/test split with the multi-low-resolution
    protocol: camera 0 serves as the LR camera, queries are its test-identity
    images down-sampled at rates drawn from cfg.seen_rates, the gallery keeps
    one HR image per test identity per remaining camera (single-shot).

    The training pool keeps HR originals of all train-identity images plus
    their LR syntheses at every seen rate.
    """
    if any(rec.rate != 1 for rec in records):
        raise DataError("build_mlr_split expects HR records only")
    cameras = sorted({rec.camera for rec in records})
    if len(cameras) < 2:
        raise DataError("need at least 2 cameras to form cross-camera query/gallery sets")

    rng = np.random.default_rng(cfg.seed)
    ids = sorted({rec.identity for rec in records})
    perm = [ids[i] for i in rng.permutation(len(ids))]
    n_train = (len(ids) + 1) // 2
    train_ids = sorted(perm[:n_train])
    test_ids = sorted(perm[n_train:])
    lr_camera = cameras[0]

    seen = sorted(cfg.seen_rates)
    train_hr = [rec for rec in records if rec.identity in set(train_ids)]
    train_lr = [synthesize_lr(rec, r) for rec in train_hr for r in seen]
    id_to_class = {ident: c for c, ident in enumerate(train_ids)}
    train = TrainSet(
        hr_records=train_hr,
        lr_records=train_lr,
        identities=train_ids,
        id_to_class=id_to_class,
    )

    query: list[ImageRecord] = []
    gallery: list[ImageRecord] = []
    for ident in test_ids:
        own = [rec for rec in records if rec.identity == ident]
        for rec in own:
            if rec.camera == lr_camera:
                rate = int(rng.choice(seen))
                query.append(synthesize_lr(rec, rate))
        for cam in cameras[1:]:
            cam_recs = [rec for rec in own if rec.camera == cam]
            if cam_recs:
                pick = int(rng.integers(len(cam_recs)))
                gallery.append(cam_recs[pick])
    return MlrSplit(train, query, gallery, lr_camera, train_ids, test_ids, cfg)


def pk_sample(train: TrainSet, spec: BatchSpec, rng: np.random.Generator) -> Batch:
    """Draw a PK batch: P identities, K HR images each, plus an independently
    drawn and independently shuffled LR stream over the same identities."""
    if len(train.identities) < spec.p:
        raise DataError(
            f"cannot draw {spec.p} distinct identities from {len(train.identities)}"
        )
    hr_by_id = train.hr_indices_by_id()
    lr_by_id = train.lr_indices_by_id()
    chosen = rng.choice(np.asarray(train.identities), size=spec.p, replace=False)

    hr_picks: list[int] = []
    lr_picks: list[int] = []
    for ident in chosen:
        pool_h = hr_by_id[int(ident)]
        pool_l = lr_by_id[int(ident)]
        # Identities with fewer than K images are sampled with replacement
        # to keep the batch shape static.
        hr_picks.extend(rng.choice(pool_h, size=spec.k, replace=len(pool_h) < spec.k))
        lr_picks.extend(rng.choice(pool_l, size=spec.k, replace=len(pool_l) < spec.k))
    hr_order = rng.permutation(spec.total)
    lr_order = rng.permutation(spec.total)
    hr_recs = [train.hr_records[hr_picks[i]] for i in hr_order]
    lr_recs = [train.lr_records[lr_picks[i]] for i in lr_order]

    return Batch(
        x_hr=np.stack([r.pixels for r in hr_recs]),
        y_hr=np.array([r.identity for r in hr_recs], dtype=np.int64),
        cls_hr=np.array([train.id_to_class[r.identity] for r in hr_recs], dtype=np.int64),
        labeled_hr=np.array([r.labeled for r in hr_recs], dtype=bool),
        x_lr=np.stack([r.pixels for r in lr_recs]),
        y_lr=np.array([r.identity for r in lr_recs], dtype=np.int64),
        cls_lr=np.array([train.id_to_class[r.identity] for r in lr_recs], dtype=np.int64),
        labeled_lr=np.array([r.labeled for r in lr_recs], dtype=bool),
        lr_truth=np.stack([r.hr_truth for r in lr_recs]),
        rates=np.array([r.rate for r in lr_recs], dtype=np.int64),
    )


def mask_labels(train: TrainSet, k_percent: float, seed: int) -> TrainSet:
    """Keep labels on round(k% * |identities|) identities, masking the rest.

    Masking is identity-granular: all images of an identity share one flag.
    Unlabeled records stay in the pool (they still drive the adversarial,
    reconstruction, and consistency losses).
    """
    if not 0.0 <= k_percent <= 100.0:
        raise DataError(f"k_percent must be in [0, 100], got {k_percent}")
    ids = sorted(train.identities)
    n_keep = int(np.floor(k_percent / 100.0 * len(ids) + 0.5))
    rng = np.random.default_rng(seed)
    keep = set(int(i) for i in rng.choice(np.asarray(ids), size=n_keep, replace=False)) if n_keep else set()

    def relabel(rec: ImageRecord) -> ImageRecord:
        return dataclasses.replace(rec, labeled=rec.identity in keep)

    return TrainSet(
        hr_records=[relabel(r) for r in train.hr_records],
        lr_records=[relabel(r) for r in train.lr_records],
        identities=list(train.identities),
        id_to_class=dict(train.id_to_class),
    )


# ---------------------------------------------------------------------------
# Procedural toy identity generator
# ---------------------------------------------------------------------------

def _rotation_matrix(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix about a unit axis."""
    x, y, z = axis
    c, s = np.cos(angle), np.sin(angle)
    cross = np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]], dtype=np.float64)
    return c * np.eye(3) + s * cross + (1 - c) * np.outer(axis, axis)


def generate_toy_dataset(cfg: DatasetConfig) -> list[ImageRecord]:
    """Procedural identities: a base color, a stripe pattern, and two blobs,
    rendered with per-image jitter and a strong per-camera color rotation.

    The color rotation (~120 degrees about a random axis, camera 0 is the
    reference) makes raw cross-camera pixel matching uninformative while a
    trained encoder can still learn camera-invariant identity features.
    Deterministic given cfg.seed.
    """
    rng = np.random.default_rng(cfg.seed)
    h, w = cfg.height, cfg.width

    identities = []
    for _ in range(cfg.num_identities):
        identities.append({
            "base": rng.uniform(0.15, 0.85, size=3),
            "stripe_color": rng.uniform(0.05, 0.95, size=3),
            "period": int(rng.integers(6, 14)),
            "stripe_width": int(rng.integers(2, 5)),
            "phase": int(rng.integers(0, 14)),
            "blobs": [
                {
                    "cy": rng.uniform(0.15, 0.85) * h,
                    "cx": rng.uniform(0.15, 0.85) * w,
                    "ry": rng.uniform(0.10, 0.22) * h,
                    "rx": rng.uniform(0.12, 0.30) * w,
                    "color": rng.uniform(0.05, 0.95, size=3),
                }
                for _ in range(2)
            ],
        })

    tints = []
    for cam in range(cfg.cameras):
        if cam == 0:
            tints.append((np.eye(3), np.zeros(3)))
        else:
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            angle = np.deg2rad(rng.uniform(110.0, 130.0))
            offset = rng.uniform(-0.05, 0.05, size=3)
            tints.append((_rotation_matrix(axis, angle), offset))

    yy, xx = np.mgrid[0:h, 0:w]
    records: list[ImageRecord] = []
    for ident_idx, sig in enumerate(identities):
        stripe_rows = ((np.arange(h) + sig["phase"]) % sig["period"]) < sig["stripe_width"]
        canvas = np.tile(sig["base"], (h, w, 1))
        canvas[stripe_rows, :, :] = sig["stripe_color"]
        for blob in sig["blobs"]:
            mask = ((yy - blob["cy"]) / blob["ry"]) ** 2 + ((xx - blob["cx"]) / blob["rx"]) ** 2 <= 1.0
            canvas[mask] = blob["color"]

        for cam in range(cfg.cameras):
            mat, offset = tints[cam]
            for _ in range(cfg.images_per_id_per_cam):
                dy = int(np.round(rng.uniform(-0.1, 0.1) * w))
                dx = int(np.round(rng.uniform(-0.1, 0.1) * w))
                img = np.roll(canvas, (dy, dx), axis=(0, 1))
                img = img + rng.uniform(-0.1, 0.1)
                img = (img - 0.5) @ mat.T + 0.5 + offset
                img = img + rng.normal(0.0, 0.02, size=img.shape)
                records.append(ImageRecord(
                    pixels=np.clip(img, 0.0, 1.0).astype(np.float32),
                    identity=ident_idx,
                    camera=cam,
                ))
    return records


# ---------------------------------------------------------------------------
# Disk layout: <root>/<identity>/<camera>/<name>.png, 8-bit RGB
# ---------------------------------------------------------------------------

def write_dataset_dir(records: list[ImageRecord], root) -> int:
    """Write HR records as 8-bit PNGs in the documented layout."""
    from PIL import Image

    root = Path(root)
    counters: dict[tuple[int, int], int] = {}
    n = 0
    for rec in records:
        key = (rec.identity, rec.camera)
        counters[key] = counters.get(key, 0) + 1
        sub = root / f"{rec.identity:04d}" / f"{rec.camera:02d}"
        sub.mkdir(parents=True, exist_ok=True)
        arr = np.clip(np.round(rec.pixels * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(arr, mode="RGB").save(sub / f"img_{counters[key]:03d}.png")
        n += 1
    return n


def load_dataset_dir(root, cfg: DatasetConfig) -> list[ImageRecord]:
    """Load a dataset directory, rescaling to [0, 1] and resizing to the
    configured height x width (bilinear) when needed."""
    from PIL import Image

    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset directory not found: {root}")
    records: list[ImageRecord] = []
    for id_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        try:
            ident = int(id_dir.name)
        except ValueError:
            continue
        for cam_dir in sorted(p for p in id_dir.iterdir() if p.is_dir()):
            cam = int(cam_dir.name)
            for img_path in sorted(cam_dir.glob("*.png")):
                arr = np.asarray(Image.open(img_path).convert("RGB"), dtype=np.float32) / 255.0
                if arr.shape[:2] != (cfg.height, cfg.width):
                    arr = np.clip(bilinear_resize(arr, cfg.height, cfg.width), 0.0, 1.0)
                records.append(ImageRecord(pixels=arr.astype(np.float32), identity=ident, camera=cam))
    if not records:
        raise DataError(f"no images found under {root}")
    return records
