"""Alternating optimization of the recovery GAN, the discriminators, the HR
encoder, and the classifier, plus checkpointing and run management.

One training step runs four phases in a fixed order:
  A. update encoder E and decoder G on generator-side adversarial +
     reconstruction losses;
  B. update the feature discriminators and the image discriminator on
     detached activations from phase A;
  C. re-encode recovered images with the HR encoder F and update F on the
     feature consistency loss;
  D. re-forward everything (parameters changed) and update E, G, F, C on the
     classification loss, which is how the recovery path is pulled toward
     identity-discriminative detail.

Phases whose loss weight is zero are skipped entirely, so e.g. with the
feature-adversarial weight at 0 the feature discriminators stay at their
initialization forever.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import optim

from .datapipe import Batch, BatchSpec, MlrSplit, pk_sample
from .losses import (
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
from .network import (
    BundleConfig,
    NetworkBundle,
    NonFiniteError,
    build_bundle,
    images_to_tensor,
    joint_embed,
)


class TrainAbort(RuntimeError):
    """Raised when a step hits non-finite values or an invalid batch; carries
    the path of the state dump when one was written."""

    def __init__(self, msg: str, dump_path: Path | None = None):
        super().__init__(msg)
        self.dump_path = dump_path


class CheckpointError(RuntimeError):
    pass


class CheckpointMismatch(CheckpointError):
    """Checkpoint manifest does not match the live configuration."""


@dataclass(frozen=True)
class TrainConfig:
    lr_main: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_disc: float = 1e-4
    disc_momentum: float = 0.9
    disc_weight_decay: float = 0.0
    batch: BatchSpec = field(default_factory=BatchSpec)
    iterations: int = 1000
    inner_crgan_steps: int = 1
    inner_disc_steps: int = 1
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    eval_every: int = 0
    checkpoint_every: int = 0
    deterministic: bool = True

    def __post_init__(self):
        if self.lr_main < 0 or self.lr_disc < 0:
            raise ValueError("learning rates must be >= 0")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.inner_crgan_steps < 1 or self.inner_disc_steps < 1:
            raise ValueError("inner step counts must be >= 1")


# ---------------------------------------------------------------------------
# Checkpoint archive: deterministic zip of npy arrays + text manifest
# ---------------------------------------------------------------------------

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, arr)
    return buf.getvalue()


def _write_archive(path, entries: dict[str, bytes]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name in sorted(entries):
            info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
            info.compress_type = zipfile.ZIP_DEFLATED
            info.external_attr = 0o600 << 16
            zf.writestr(info, entries[name])


def _manifest_text(config: BundleConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in config.manifest().items())


def save_checkpoint(
    bundle: NetworkBundle,
    optimizers: dict[str, optim.Optimizer],
    rng: np.random.Generator,
    iteration: int,
    path,
) -> Path:
    """Serialize parameters, momentum buffers, rng state, and the iteration
    counter into one archive.  Re-saving a loaded checkpoint reproduces the
    file byte for byte."""
    entries: dict[str, bytes] = {}
    entries["manifest.txt"] = _manifest_text(bundle.config).encode()
    entries["meta.txt"] = f"iteration = {iteration}\n".encode()
    entries["rng.json"] = json.dumps(rng.bit_generator.state, sort_keys=True).encode()
    for name, param in bundle.named_parameters():
        entries[f"params/{name}.npy"] = _npy_bytes(param.detach().cpu().numpy())
    for comp_name, opt in optimizers.items():
        comp = bundle.components()[comp_name]
        named = dict(comp.named_parameters())
        for pname, param in named.items():
            state = opt.state.get(param)
            if state and state.get("momentum_buffer") is not None:
                entries[f"optim/{comp_name}.{pname}.npy"] = _npy_bytes(
                    state["momentum_buffer"].detach().cpu().numpy()
                )
    _write_archive(path, entries)
    return Path(path)


@dataclass
class Checkpoint:
    config: BundleConfig
    params: dict[str, np.ndarray]
    momenta: dict[str, np.ndarray]
    rng_state: dict
    iteration: int

    def build_bundle(self) -> NetworkBundle:
        bundle = build_bundle(self.config, seed=0)
        self.load_into(bundle)
        return bundle

    def load_into(self, bundle: NetworkBundle) -> NetworkBundle:
        if bundle.config.manifest() != self.config.manifest():
            raise CheckpointMismatch(
                "checkpoint manifest does not match the live bundle config:\n"
                f"  checkpoint: {self.config.manifest()}\n"
                f"  live:       {bundle.config.manifest()}"
            )
        live = dict(bundle.named_parameters())
        if set(live) != set(self.params):
            raise CheckpointMismatch("parameter namespace mismatch")
        with torch.no_grad():
            for name, arr in self.params.items():
                if tuple(live[name].shape) != arr.shape:
                    raise CheckpointMismatch(f"shape mismatch for {name}")
                live[name].copy_(torch.from_numpy(arr.copy()))
        return bundle

    def load_optimizers(self, bundle: NetworkBundle, optimizers: dict[str, optim.Optimizer]):
        for comp_name, opt in optimizers.items():
            comp = bundle.components()[comp_name]
            for pname, param in comp.named_parameters():
                key = f"{comp_name}.{pname}"
                if key in self.momenta:
                    opt.state[param] = {
                        "momentum_buffer": torch.from_numpy(self.momenta[key].copy())
                    }


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = {}
            for line in zf.read("manifest.txt").decode().splitlines():
                if line.strip():
                    k, _, v = line.partition(" = ")
                    manifest[k.strip()] = v.strip()
            if manifest.get("format") != "crossreid-ckpt-1":
                raise CheckpointError(f"unrecognized checkpoint format in {path}")
            meta = zf.read("meta.txt").decode()
            iteration = int(meta.partition(" = ")[2])
            rng_state = json.loads(zf.read("rng.json").decode())
            params: dict[str, np.ndarray] = {}
            momenta: dict[str, np.ndarray] = {}
            for name in zf.namelist():
                if name.startswith("params/") and name.endswith(".npy"):
                    params[name[len("params/"):-4]] = np.load(io.BytesIO(zf.read(name)))
                elif name.startswith("optim/") and name.endswith(".npy"):
                    momenta[name[len("optim/"):-4]] = np.load(io.BytesIO(zf.read(name)))
    except (zipfile.BadZipFile, KeyError, ValueError) as exc:
        raise CheckpointError(f"corrupt or unreadable checkpoint {path}: {exc}") from exc
    return Checkpoint(
        config=BundleConfig.from_manifest(manifest),
        params=params,
        momenta=momenta,
        rng_state=rng_state,
        iteration=iteration,
    )


# ---------------------------------------------------------------------------
# Trainer
# ---------------------------------------------------------------------------

class Trainer:
    """Single writer of all parameters and optimizer state."""

    MAIN_COMPONENTS = ("E", "G", "F", "C")
    DISC_COMPONENTS = ("D_F", "D_I")

    def __init__(self, bundle: NetworkBundle, cfg: TrainConfig, run_dir=None):
        self.bundle = bundle
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.iteration = 0
        self.run_dir = Path(run_dir) if run_dir is not None else None
        if self.run_dir is not None:
            (self.run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        self.optimizers: dict[str, optim.Optimizer] = {}
        for name in self.MAIN_COMPONENTS:
            self.optimizers[name] = optim.SGD(
                bundle.components()[name].parameters(),
                lr=cfg.lr_main, momentum=cfg.momentum, weight_decay=cfg.weight_decay,
            )
        for name in self.DISC_COMPONENTS:
            self.optimizers[name] = optim.SGD(
                bundle.components()[name].parameters(),
                lr=cfg.lr_disc, momentum=cfg.disc_momentum, weight_decay=cfg.disc_weight_decay,
            )
        if cfg.deterministic:
            torch.use_deterministic_algorithms(True)

    # -- helpers -------------------------------------------------------------
    def _zero_all(self):
        for opt in self.optimizers.values():
            opt.zero_grad(set_to_none=True)

    def _step(self, *names: str):
        for name in names:
            self.optimizers[name].step()

    def _validate_batch(self, batch: Batch):
        spec = self.cfg.batch
        for labels in (batch.cls_hr, batch.cls_lr):
            if labels.shape[0] != spec.total:
                raise TrainAbort(f"batch size {labels.shape[0]} != P*K = {spec.total}")
            uniq, counts = np.unique(labels, return_counts=True)
            if len(uniq) < 2 or counts.min() < 2:
                raise TrainAbort("batch violates PK structure (needs >=2 ids with >=2 samples)")

    def _dump_state(self, reason: str) -> Path | None:
        if self.run_dir is None:
            return None
        path = self.run_dir / "abort.ckpt"
        try:
            save_checkpoint(self.bundle, self.optimizers, self.rng, self.iteration, path)
        except Exception:
            return None
        return path

    # -- one optimization step ------------------------------------------------
    def train_step(self, batch: Batch) -> LossReport:
        """Run phases A-D on one PK batch and return the per-term report."""
        self._validate_batch(batch)
        cfg, w, bundle = self.cfg, self.cfg.weights, self.bundle
        bundle.train()
        try:
            return self._train_step_inner(batch, cfg, w, bundle)
        except (NonFiniteError, TrainAbort) as exc:
            dump = self._dump_state(str(exc))
            if isinstance(exc, TrainAbort):
                exc.dump_path = dump
                raise
            raise TrainAbort(f"aborting at iteration {self.iteration}: {exc}", dump) from exc

    def _train_step_inner(self, batch: Batch, cfg, w, bundle) -> LossReport:
        # The HR and LR streams run through shared-architecture components
        # with per-sample normalization, so they are batched together for one
        # forward per component and split afterwards.
        b = batch.x_hr.shape[0]
        x_both = images_to_tensor(np.concatenate([batch.x_hr, batch.x_lr]))
        x_hr = x_both[:b]
        truth_lr = images_to_tensor(batch.lr_truth)
        levels = bundle.config.align_levels

        use_adv_f, use_adv_i, use_rec = w.adv_f > 0, w.adv_i > 0, w.rec > 0

        g_adv_f_val = 0.0
        g_adv_i_val = 0.0
        rec_val = 0.0
        adv_f_levels: dict[int, float] = {}
        rec_both_d = None
        feats_d: dict[int, torch.Tensor] = {}

        # Phase A: CRGAN update (E, G)
        if use_adv_f or use_adv_i or use_rec:
            for _ in range(cfg.inner_crgan_steps):
                pyr = bundle.encode(x_both)
                rec_both = bundle.decode(pyr)
                gen_terms = []
                if use_adv_f:
                    level_terms = []
                    adv_f_levels = {}
                    for j in sorted(levels):
                        probs = bundle.discriminate_feature(j, pyr.level(j))
                        _, g_j = adv_feature_loss({j: probs[:b]}, {j: probs[b:]})
                        adv_f_levels[j] = float(g_j.detach())
                        level_terms.append(g_j)
                    g_adv_f = sum(level_terms)
                    g_adv_f_val = float(g_adv_f.detach())
                    gen_terms.append(w.adv_f * g_adv_f)
                if use_adv_i:
                    probs = bundle.discriminate_image(torch.cat([rec_both, x_hr]))
                    _, g_adv_i = adv_image_loss(
                        probs[2 * b:], probs[b:2 * b], probs[:b], w.dedup_image_real
                    )
                    g_adv_i_val = float(g_adv_i.detach())
                    gen_terms.append(w.adv_i * g_adv_i)
                if use_rec:
                    rec_term = rec_loss(rec_both[:b], rec_both[b:], x_hr, truth_lr)
                    rec_val = float(rec_term.detach())
                    gen_terms.append(w.rec * rec_term)
                self._zero_all()
                sum(gen_terms).backward()
                self._step("E", "G")
                rec_both_d = rec_both.detach()
                feats_d = {j: pyr.level(j).detach() for j in levels}

        # Phase B: discriminators on detached activations from phase A
        d_f_val = 0.0
        d_i_val = 0.0
        if use_adv_f or use_adv_i:
            for _ in range(cfg.inner_disc_steps):
                disc_terms = []
                if use_adv_f:
                    d_out_hr, d_out_lr = {}, {}
                    for j in levels:
                        probs = bundle.discriminate_feature(j, feats_d[j])
                        d_out_hr[j], d_out_lr[j] = probs[:b], probs[b:]
                    d_adv_f, _ = adv_feature_loss(d_out_hr, d_out_lr)
                    d_f_val = float(d_adv_f.detach())
                    disc_terms.append(w.adv_f * d_adv_f)
                if use_adv_i:
                    probs = bundle.discriminate_image(torch.cat([rec_both_d, x_hr]))
                    d_adv_i, _ = adv_image_loss(
                        probs[2 * b:], probs[b:2 * b], probs[:b], w.dedup_image_real
                    )
                    d_i_val = float(d_adv_i.detach())
                    disc_terms.append(w.adv_i * d_adv_i)
                self._zero_all()
                sum(disc_terms).backward()
                self._step("D_F", "D_I")

        # Phase C: HR encoder update via feature consistency
        consist_val = 0.0
        if w.consist > 0:
            if rec_both_d is None:
                with torch.no_grad():
                    rec_both_d = bundle.decode(bundle.encode(x_both))
            g_tilde = bundle.hr_encode(rec_both_d)
            with torch.no_grad():
                g_truth = bundle.hr_encode(torch.cat([x_hr, truth_lr]))
            consist = consist_loss(g_tilde[:b], g_truth[:b], g_tilde[b:], g_truth[b:])
            consist_val = float(consist.detach())
            self._zero_all()
            (w.consist * consist).backward()
            self._step("F")

        # Phase D: classification update through the whole joint path,
        # re-forwarded because phases A-C changed the parameters.  Skipped
        # outright when nothing in the batch is labeled (the classification
        # loss contributes zero terms in that regime).
        id_val = 0.0
        tri_val = 0.0
        if batch.labeled_hr.any() or batch.labeled_lr.any():
            labels = torch.from_numpy(np.concatenate([batch.cls_hr, batch.cls_lr]))
            mask = torch.from_numpy(np.concatenate([batch.labeled_hr, batch.labeled_lr]))

            pyr = bundle.encode(x_both)
            g_map = bundle.hr_encode(bundle.decode(pyr))
            emb = joint_embed(pyr.deepest, g_map, bundle.config.embed)
            logits = bundle.classify(emb.v)
            id_term = id_loss(logits, labels, mask)
            mask_hr, mask_lr = mask[:b], mask[b:]
            tri_term = (
                triplet_loss(emb.u[:b][mask_hr], labels[:b][mask_hr], w.margin, strict=False)
                + triplet_loss(emb.u[b:][mask_lr], labels[b:][mask_lr], w.margin, strict=False)
            )
            cls_term = id_term + tri_term
            self._zero_all()
            cls_term.backward()
            self._step("E", "G", "F", "C")
            id_val, tri_val = float(id_term.detach()), float(tri_term.detach())

        report = total_loss(
            adv_f_levels, g_adv_f_val, rec_val, g_adv_i_val, consist_val,
            id_val, tri_val, w, d_f=d_f_val, d_i=d_i_val,
        )
        self.iteration += 1
        return report

    # -- full loop -------------------------------------------------------------
    def train_loop(self, split: MlrSplit, evaluate_fn=None) -> list[LossReport]:
        """Run cfg.iterations steps over PK batches from the split's training
        pool.  Writes losses.csv and checkpoints when a run directory is
        configured.  ``evaluate_fn(bundle, split)`` is invoked at eval_every
        cadence (on the live bundle, which is frozen for the duration of the
        call) and is responsible for its own output."""
        cfg = self.cfg
        reports: list[LossReport] = []
        losses_path = None
        if self.run_dir is not None:
            losses_path = self.run_dir / "losses.csv"
            if not losses_path.exists():
                losses_path.write_text(LossReport.CSV_HEADER + "\n")
            self.save(self.run_dir / "checkpoints" / f"iter_{self.iteration}.ckpt")

        remaining = cfg.iterations - self.iteration
        for _ in range(max(0, remaining)):
            batch = pk_sample(split.train, cfg.batch, self.rng)
            report = self.train_step(batch)
            reports.append(report)
            if losses_path is not None:
                with open(losses_path, "a") as fh:
                    fh.write(report.csv_row(self.iteration) + "\n")
            if (
                cfg.eval_every > 0
                and evaluate_fn is not None
                and self.iteration % cfg.eval_every == 0
            ):
                evaluate_fn(self.bundle, split)
            if (
                cfg.checkpoint_every > 0
                and self.run_dir is not None
                and self.iteration % cfg.checkpoint_every == 0
            ):
                self.save(self.run_dir / "checkpoints" / f"iter_{self.iteration}.ckpt")
        if self.run_dir is not None:
            self.save(self.run_dir / "final.ckpt")
        return reports

    # -- persistence -----------------------------------------------------------
    def save(self, path) -> Path:
        return save_checkpoint(self.bundle, self.optimizers, self.rng, self.iteration, path)

    @classmethod
    def from_checkpoint(cls, path, cfg: TrainConfig, run_dir=None,
                        bundle: NetworkBundle | None = None) -> "Trainer":
        """Rebuild a trainer whose continuation is bitwise identical to an
        uninterrupted run in deterministic mode."""
        ckpt = load_checkpoint(path)
        if bundle is None:
            bundle = ckpt.build_bundle()
        else:
            ckpt.load_into(bundle)
        trainer = cls(bundle, cfg, run_dir=run_dir)
        ckpt.load_optimizers(bundle, trainer.optimizers)
        trainer.rng.bit_generator.state = ckpt.rng_state
        trainer.iteration = ckpt.iteration
        return trainer
