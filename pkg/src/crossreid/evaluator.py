"""Retrieval evaluation (single-shot CMC, mAP), recovered-image quality
metrics (PSNR, SSIM), and embedding dumps."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.signal import convolve2d

from .datapipe import ImageRecord, MlrSplit, synthesize_lr
from .network import NetworkBundle, images_to_tensor, tensor_to_images


class EvalError(ValueError):
    pass


EVAL_CSV_HEADER = "setting,rank1,rank5,rank10,mAP,mean_psnr,mean_ssim,n_query,n_gallery"


# ---------------------------------------------------------------------------
# Embeddings and ranking
# ---------------------------------------------------------------------------

@dataclass
class GalleryIndex:
    embeddings: np.ndarray   # (N, dim)
    identities: np.ndarray   # (N,)
    cameras: np.ndarray      # (N,)

    def __post_init__(self):
        if self.embeddings.ndim != 2:
            raise EvalError("gallery embeddings must be (N, dim)")
        if not np.isfinite(self.embeddings).all():
            raise EvalError("non-finite gallery embeddings")


@dataclass
class CMCResult:
    cmc: np.ndarray                       # match rate at ranks 1..N
    map_score: float
    per_query: list[tuple[int, np.ndarray]]  # (query identity, ranked gallery ids)

    def rank(self, k: int) -> float:
        """cmc at rank k, saturating at the last rank for short galleries."""
        idx = min(k, len(self.cmc)) - 1
        return float(self.cmc[idx])


def extract_embeddings(bundle: NetworkBundle, records: list[ImageRecord],
                       batch_size: int = 32) -> np.ndarray:
    """Pooled joint embeddings for a list of records (inference mode).

    The path is identical for every down-sampling rate, seen or unseen:
    encode, recover, re-encode, concatenate, pool.
    """
    bundle.eval()
    out = []
    with torch.no_grad():
        for lo in range(0, len(records), batch_size):
            chunk = records[lo:lo + batch_size]
            x = images_to_tensor(np.stack([r.pixels for r in chunk]))
            emb = bundle.embed_images(x)
            out.append(emb.u.cpu().numpy().astype(np.float32))
    return np.concatenate(out, axis=0)


def extract_embedding(bundle: NetworkBundle, record: ImageRecord) -> np.ndarray:
    """Single-record convenience wrapper around extract_embeddings."""
    return extract_embeddings(bundle, [record])[0]


def build_gallery_index(bundle: NetworkBundle, gallery: list[ImageRecord]) -> GalleryIndex:
    return GalleryIndex(
        embeddings=extract_embeddings(bundle, gallery),
        identities=np.array([r.identity for r in gallery], dtype=np.int64),
        cameras=np.array([r.camera for r in gallery], dtype=np.int64),
    )


def rank_query(u_q: np.ndarray, index: GalleryIndex) -> np.ndarray:
    """Gallery positions sorted by ascending Euclidean distance to the query;
    ties broken by stable gallery order."""
    if index.embeddings.shape[0] == 0:
        raise EvalError("empty gallery")
    if u_q.shape[-1] != index.embeddings.shape[1]:
        raise EvalError("query/gallery dimension mismatch")
    d = np.linalg.norm(index.embeddings - np.asarray(u_q)[None, :], axis=1)
    return np.argsort(d, kind="stable")


def cmc_map(
    query_ids: np.ndarray,
    query_cams: np.ndarray,
    rankings: list[np.ndarray],
    index: GalleryIndex,
) -> CMCResult:
    """Cumulative match characteristic and mean average precision.

    Gallery entries sharing both identity and camera with the query are
    excluded (the usual re-ID convention; vacuous when query and gallery
    cameras are disjoint by construction).
    """
    n_q = len(rankings)
    if n_q == 0:
        raise EvalError("no queries")
    per_query = []
    cmc_rows = []
    aps = []
    max_rank = None
    for qi in range(n_q):
        order = rankings[qi]
        qid, qcam = int(query_ids[qi]), int(query_cams[qi])
        g_ids = index.identities[order]
        g_cams = index.cameras[order]
        keep = ~((g_ids == qid) & (g_cams == qcam))
        kept_ids = g_ids[keep]
        matches = (kept_ids == qid).astype(np.int64)
        if matches.sum() == 0:
            raise EvalError(f"query identity {qid} absent from the gallery")
        first_hit = int(np.argmax(matches))
        row = np.zeros(len(kept_ids), dtype=np.float64)
        row[first_hit:] = 1.0
        cmc_rows.append(row)
        cum = np.cumsum(matches)
        precision_at = cum / np.arange(1, len(matches) + 1)
        aps.append(float((precision_at * matches).sum() / matches.sum()))
        per_query.append((qid, kept_ids.copy()))
        max_rank = len(kept_ids) if max_rank is None else min(max_rank, len(kept_ids))
    cmc = np.mean([row[:max_rank] for row in cmc_rows], axis=0)
    return CMCResult(cmc=cmc, map_score=float(np.mean(aps)), per_query=per_query)


# ---------------------------------------------------------------------------
# Image quality metrics
# ---------------------------------------------------------------------------

PSNR_CAP_DB = 100.0


def psnr(x: np.ndarray, y: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1] (peak = 1.0),
    capped at 100 dB for (near-)identical inputs."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise EvalError(f"shape mismatch: {x.shape} vs {y.shape}")
    mse = np.mean((x - y) ** 2)
    if mse < 1e-10:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(1.0 / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = size // 2
    coords = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    win = np.outer(g, g)
    return win / win.sum()


_SSIM_WIN = _gaussian_window()
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def ssim(x: np.ndarray, y: np.ndarray) -> float:
    """Structural similarity with the classic 11x11 Gaussian window
    (sigma 1.5), averaged over channels; windows fully inside the image."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise EvalError(f"shape mismatch: {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    if x.shape[0] < 11 or x.shape[1] < 11:
        raise EvalError("images smaller than the 11x11 SSIM window")
    vals = []
    for c in range(x.shape[2]):
        xc, yc = x[..., c], y[..., c]
        mu_x = convolve2d(xc, _SSIM_WIN, mode="valid")
        mu_y = convolve2d(yc, _SSIM_WIN, mode="valid")
        var_x = convolve2d(xc * xc, _SSIM_WIN, mode="valid") - mu_x * mu_x
        var_y = convolve2d(yc * yc, _SSIM_WIN, mode="valid") - mu_y * mu_y
        cov = convolve2d(xc * yc, _SSIM_WIN, mode="valid") - mu_x * mu_y
        num = (2 * mu_x * mu_y + SSIM_C1) * (2 * cov + SSIM_C2)
        den = (mu_x ** 2 + mu_y ** 2 + SSIM_C1) * (var_x + var_y + SSIM_C2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


BUILTIN_QUALITY_METRICS = {"psnr": psnr, "ssim": ssim}


# ---------------------------------------------------------------------------
# Full evaluation of a setting
# ---------------------------------------------------------------------------

@dataclass
class EvalOutcome:
    setting: str
    result: CMCResult
    quality: dict[str, float]
    n_query: int
    n_gallery: int

    def csv_row(self) -> str:
        return (
            f"{self.setting},{self.result.rank(1):.6f},{self.result.rank(5):.6f},"
            f"{self.result.rank(10):.6f},{self.result.map_score:.6f},"
            f"{self.quality.get('psnr', float('nan')):.6f},"
            f"{self.quality.get('ssim', float('nan')):.6f},"
            f"{self.n_query},{self.n_gallery}"
        )

    def summary_line(self) -> str:
        return (
            f"setting={self.setting} rank1={self.result.rank(1):.4f} "
            f"rank5={self.result.rank(5):.4f} rank10={self.result.rank(10):.4f} "
            f"mAP={self.result.map_score:.4f}"
        )


def _queries_for_setting(split: MlrSplit, setting: str) -> tuple[list[ImageRecord], str]:
    """Materialize the query set for a named setting.

    cross:      the split's LR queries as built (rates drawn from seen_rates).
    standard:   the same images at native resolution (HR query vs HR gallery).
    unseen:<r>: queries rebuilt from their HR sources at the forced rate r;
                the identity membership never changes, only the rate tags.
    """
    name = setting.strip()
    if name in ("cross", "cross_resolution"):
        return list(split.query), "cross"
    if name == "standard":
        hr = [
            ImageRecord(pixels=q.hr_truth, identity=q.identity, camera=q.camera, rate=1)
            for q in split.query
        ]
        return hr, "standard"
    if name.startswith("unseen:"):
        r = int(name.split(":", 1)[1])
        forced = [
            synthesize_lr(
                ImageRecord(pixels=q.hr_truth, identity=q.identity, camera=q.camera, rate=1),
                r,
            )
            for q in split.query
        ]
        return forced, f"unseen:{r}"
    raise EvalError(f"unknown evaluation setting {setting!r}")


def evaluate_setting(
    bundle: NetworkBundle,
    split: MlrSplit,
    setting: str,
    out_dir=None,
    extra_metrics: dict | None = None,
) -> EvalOutcome:
    """Embed queries and gallery, rank, and compute CMC/mAP; for every query
    also score the recovered image against its HR source with PSNR/SSIM (and
    any extra quality metric plugins).  Optionally writes an eval.csv row,
    the per-rank CMC curve, and an embedding dump to out_dir."""
    queries, canon = _queries_for_setting(split, setting)
    if not queries or not split.gallery:
        raise EvalError("empty query or gallery set")
    index = build_gallery_index(bundle, split.gallery)
    q_emb = extract_embeddings(bundle, queries)
    rankings = [rank_query(q_emb[i], index) for i in range(len(queries))]
    result = cmc_map(
        np.array([q.identity for q in queries]),
        np.array([q.camera for q in queries]),
        rankings,
        index,
    )

    metrics = dict(BUILTIN_QUALITY_METRICS)
    metrics.update(extra_metrics or {})
    sums = {name: 0.0 for name in metrics}
    bundle.eval()
    with torch.no_grad():
        for lo in range(0, len(queries), 32):
            chunk = queries[lo:lo + 32]
            x = images_to_tensor(np.stack([r.pixels for r in chunk]))
            recovered = tensor_to_images(bundle.decode(bundle.encode(x)))
            for rec_img, q in zip(recovered, chunk):
                for name, fn in metrics.items():
                    sums[name] += float(fn(rec_img, q.hr_truth))
    quality = {name: s / len(queries) for name, s in sums.items()}

    outcome = EvalOutcome(
        setting=canon,
        result=result,
        quality=quality,
        n_query=len(queries),
        n_gallery=len(split.gallery),
    )
    if out_dir is not None:
        write_eval_outputs(outcome, q_emb, queries, index, split, Path(out_dir))
    return outcome


# ---------------------------------------------------------------------------
# On-disk artifacts
# ---------------------------------------------------------------------------

def append_eval_row(out_dir: Path, outcome: EvalOutcome):
    path = Path(out_dir) / "eval.csv"
    if not path.exists():
        path.write_text(EVAL_CSV_HEADER + "\n")
    with open(path, "a") as fh:
        fh.write(outcome.csv_row() + "\n")


def dump_embeddings(path_prefix: Path, embeddings: np.ndarray, records: list[ImageRecord]):
    """Binary dump: row-major little-endian float32 plus a text manifest with
    the identity/camera/rate of every row."""
    emb = np.ascontiguousarray(embeddings.astype("<f4"))
    bin_path = Path(str(path_prefix) + ".bin")
    bin_path.write_bytes(emb.tobytes())
    manifest = [
        f"n = {emb.shape[0]}",
        f"dim = {emb.shape[1]}",
        "identities = " + ",".join(str(r.identity) for r in records),
        "cameras = " + ",".join(str(r.camera) for r in records),
        "rates = " + ",".join(str(r.rate) for r in records),
    ]
    Path(str(path_prefix) + ".manifest.txt").write_text("\n".join(manifest) + "\n")


def write_eval_outputs(outcome: EvalOutcome, q_emb: np.ndarray,
                       queries: list[ImageRecord], index: GalleryIndex,
                       split: MlrSplit, out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    append_eval_row(out_dir, outcome)
    tag = outcome.setting.replace(":", "_")
    cmc_path = out_dir / f"cmc_{tag}.csv"
    with open(cmc_path, "w") as fh:
        fh.write("rank,match_rate\n")
        for k, v in enumerate(outcome.result.cmc, start=1):
            fh.write(f"{k},{v:.6f}\n")
    dump_embeddings(out_dir / f"embeddings_query_{tag}", q_emb, queries)
    dump_embeddings(out_dir / f"embeddings_gallery_{tag}", index.embeddings, split.gallery)
