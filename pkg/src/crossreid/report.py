"""Plot and summary emission for completed runs: loss curves, CMC curves,
recovered-image grids, and a text summary table."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
from PIL import Image

from .datapipe import ImageRecord, synthesize_lr
from .network import NetworkBundle, images_to_tensor, tensor_to_images

GRID_PAD = 2


def write_loss_plot(losses_csv, out_png) -> Path:
    rows = list(csv.DictReader(open(losses_csv)))
    if not rows:
        raise ValueError(f"no loss rows in {losses_csv}")
    iters = [int(r["iter"]) for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    for col in ("adv_F", "rec", "adv_I", "consist", "id", "tri", "total"):
        ax.plot(iters, [float(r[col]) for r in rows], label=col, linewidth=1)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    fig.savefig(out_png, dpi=110)
    plt.close(fig)
    return Path(out_png)


def write_cmc_plot(cmc_csvs: list, out_png) -> Path:
    fig, ax = plt.subplots(figsize=(5, 4))
    for path in cmc_csvs:
        rows = list(csv.DictReader(open(path)))
        ranks = [int(r["rank"]) for r in rows]
        rates = [float(r["match_rate"]) for r in rows]
        ax.plot(ranks, rates, marker="o", markersize=2, label=Path(path).stem.replace("cmc_", ""))
    ax.set_xlabel("rank")
    ax.set_ylabel("match rate")
    ax.set_ylim(0, 1.02)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_png, dpi=110)
    plt.close(fig)
    return Path(out_png)


def write_recovery_grid(
    bundle: NetworkBundle,
    hr_records: list[ImageRecord],
    out_png,
    rates: tuple[int, ...] = (1, 2, 3, 4, 5, 6, 7, 8),
) -> Path:
    """Grid with one column per rate; per identity, the degraded input row
    over the recovered-output row."""
    import torch

    h, w = hr_records[0].pixels.shape[:2]
    n_rows = 2 * len(hr_records)
    canvas = np.ones(
        (GRID_PAD + n_rows * (h + GRID_PAD), GRID_PAD + len(rates) * (w + GRID_PAD), 3),
        dtype=np.float32,
    )
    bundle.eval()
    with torch.no_grad():
        for row, rec in enumerate(hr_records):
            inputs = []
            for r in rates:
                inputs.append(rec.pixels if r == 1 else synthesize_lr(rec, r).pixels)
            x = images_to_tensor(np.stack(inputs))
            outputs = tensor_to_images(bundle.decode(bundle.encode(x)))
            for col, (inp, outp) in enumerate(zip(inputs, outputs)):
                y0 = GRID_PAD + 2 * row * (h + GRID_PAD)
                x0 = GRID_PAD + col * (w + GRID_PAD)
                canvas[y0:y0 + h, x0:x0 + w] = inp
                canvas[y0 + h + GRID_PAD:y0 + 2 * h + GRID_PAD, x0:x0 + w] = np.clip(outp, 0, 1)
    img = (np.clip(canvas, 0, 1) * 255).round().astype(np.uint8)
    Image.fromarray(img, mode="RGB").save(out_png)
    return Path(out_png)


def write_summary(eval_csv, out_txt) -> Path:
    rows = list(csv.DictReader(open(eval_csv)))
    header = f"{'setting':<12} {'rank1':>7} {'rank5':>7} {'rank10':>7} {'mAP':>7} {'psnr':>7} {'ssim':>7}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(
            f"{r['setting']:<12} {float(r['rank1']):>7.4f} {float(r['rank5']):>7.4f} "
            f"{float(r['rank10']):>7.4f} {float(r['mAP']):>7.4f} "
            f"{float(r['mean_psnr']):>7.2f} {float(r['mean_ssim']):>7.4f}"
        )
    Path(out_txt).write_text("\n".join(lines) + "\n")
    return Path(out_txt)
