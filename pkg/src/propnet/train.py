"""Optimization loop for the propagation network."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import (Checkpoint, build_model, load_checkpoint, model_checkpoint,
                         optimizer_state, save_checkpoint)
from .data import MaskVolume, VolumeScan, normalize_array, resample_xy, sample_training_tasks
from .losses import total_loss
from .model import PropNet

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 200
    initial_lr: float = 1e-3
    T0: int = 40
    T_mult: int = 2
    eta_min: float = 5e-6
    T: float = 40.0  # loss-weight adjusting factor
    batch_size: int = 8  # task instances (support/query pairs)
    groups_per_volume: int = 1  # support slices drawn per training volume per epoch
    erosion_kernel: int = 9
    boundary_kernel: str = "square"
    dice_reduction: str = "batch"
    grad_clip: float = 5.0
    center_jitter: int = 6
    augment: bool = True
    val_every: int = 5
    checkpoint_every: int = 20
    train_dir: str | None = None
    val_dir: str | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.initial_lr > self.eta_min > 0:
            raise ValueError("need initial_lr > eta_min > 0")
        if self.T0 < 1 or self.T_mult < 1:
            raise ValueError("T0 and T_mult must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def lr_at(epoch: float, cfg: TrainConfig) -> float:
    """Cosine annealing with warm restarts at fractional ``epoch``."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    T_i, t_cur = float(cfg.T0), float(epoch)
    if cfg.T_mult == 1:
        t_cur = epoch % cfg.T0
    else:
        while t_cur >= T_i:
            t_cur -= T_i
            T_i *= cfg.T_mult
    return cfg.eta_min + (cfg.initial_lr - cfg.eta_min) * (1 + math.cos(math.pi * t_cur / T_i)) / 2


# -- data --------------------------------------------------------------------

@dataclass
class PreparedCase:
    id: str
    image: np.ndarray  # resampled, normalized (Z, H, W)
    mask: np.ndarray
    spacing: tuple


def prepare_case(vol: VolumeScan, mask: MaskVolume, target_spacing: float, normalize_mode: str) -> PreparedCase:
    rv, rm = resample_xy(vol, mask, target_spacing)
    return PreparedCase(vol.id, normalize_array(rv.voxels, normalize_mode), rm.voxels, rv.spacing)


def _augment(arrs: list[np.ndarray], rng: np.random.Generator) -> list[np.ndarray]:
    # same flip/transpose applied to every slice of a support group
    flip_y, flip_x, transpose = rng.integers(0, 2, size=3)
    out = []
    for a in arrs:
        if flip_y:
            a = a[..., ::-1, :]
        if flip_x:
            a = a[..., :, ::-1]
        if transpose:
            a = np.swapaxes(a, -1, -2)
        out.append(np.ascontiguousarray(a))
    return out


def sample_group(case: PreparedCase, rng: np.random.Generator, crop_size: int, cfg: TrainConfig):
    vol = VolumeScan(case.image, case.spacing, case.id)
    tasks = sample_training_tasks(vol, MaskVolume(case.mask, case.spacing, case.id), rng,
                                  crop_size=crop_size, center_jitter=cfg.center_jitter)
    arrs = [
        np.stack([t.support_image for t in tasks]),
        np.stack([t.support_mask for t in tasks]),
        np.stack([t.query_image for t in tasks]),
        np.stack([t.query_mask for t in tasks]),
    ]
    if cfg.augment:
        arrs = _augment(arrs, rng)
    return arrs


def _batches(groups: list[list[np.ndarray]], batch_size: int):
    cols = [np.concatenate([g[i] for g in groups]) for i in range(4)]
    for start in range(0, len(cols[0]), batch_size):
        yield [torch.from_numpy(np.ascontiguousarray(c[start:start + batch_size])).float() for c in cols]


# -- loop --------------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Path
    best_checkpoint: Path | None
    history: list[dict] = field(default_factory=list)


def _rng_meta(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _restore_rng(state: dict) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


def train(run, out_dir: str | Path, resume: str | Path | None = None, validate=None,
          train_cases: list[PreparedCase] | None = None) -> TrainResult:
    """Train a PropNet under ``run`` (a RunConfig) writing into ``out_dir``.

    ``validate(model) -> float`` supplies the validation DSC on
    ``train.val_every`` epochs (and the last one); the best-scoring weights go
    to ``best.ckpt``. Each epoch appends to ``history.jsonl`` and per-step
    loss breakdowns to ``steps.jsonl``; ``last.ckpt`` always holds the
    resumable state.
    """
    cfg: TrainConfig = run.train
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if train_cases is None:
        train_cases = load_training_cases(run)
    if not train_cases:
        raise TrainingError("no training cases")

    torch.manual_seed(run.seed)
    model = PropNet(run.model)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.initial_lr)
    rng = np.random.default_rng(run.seed)
    start_epoch, step, best, history = 0, 0, -math.inf, []

    if resume is not None:
        ckpt = load_checkpoint(resume)
        model.load_state_dict(ckpt.section("model"))
        opt = optimizer_state(ckpt)
        if opt is not None:
            optimizer.load_state_dict(opt)
        meta = ckpt.meta
        start_epoch, step = meta["epoch"] + 1, meta["step"]
        best = meta.get("best_val", -math.inf)
        best = -math.inf if best is None else best
        history = list(meta.get("history", []))
        rng = _restore_rng(meta["rng"])
        torch.set_rng_state(ckpt.tensors["rng/torch"])
        log.info("resumed from %s at epoch %d", resume, start_epoch)

    fingerprint = run.fingerprint() if hasattr(run, "fingerprint") else None
    hist_fh = (out / "history.jsonl").open("a" if resume else "w")
    step_fh = (out / "steps.jsonl").open("a" if resume else "w")
    best_path = out / "best.ckpt" if (out / "best.ckpt").exists() and resume else None
    crop = run.model.input_size
    try:
        for epoch in range(start_epoch, cfg.epochs):
            t0 = time.perf_counter()
            model.train()
            order = np.concatenate([rng.permutation(len(train_cases)) for _ in range(cfg.groups_per_volume)])
            groups = [sample_group(train_cases[i], rng, crop, cfg) for i in order]
            batches = list(_batches(groups, cfg.batch_size))
            sums: dict[str, float] = {}
            for b, (xs, ys, xq, yq) in enumerate(batches):
                lr = lr_at(epoch + b / len(batches), cfg)
                for g in optimizer.param_groups:
                    g["lr"] = lr
                prop, ref = model(xs, ys, xq)
                loss, parts = total_loss(prop, ref, yq, cfg.erosion_kernel, epoch, cfg.T,
                                         cfg.boundary_kernel, cfg.dice_reduction)
                if not math.isfinite(parts["total"]):
                    dump = out / "nan_batch.npz"
                    np.savez(dump, support_image=xs.numpy(), support_mask=ys.numpy(),
                             query_image=xq.numpy(), query_mask=yq.numpy())
                    raise TrainingError(f"non-finite loss at epoch {epoch} step {step}: {parts}; batch dumped to {dump}")
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                if cfg.grad_clip:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                optimizer.step()
                step += 1
                step_fh.write(json.dumps({"epoch": epoch, "step": step, **parts}) + "\n")
                for k, v in parts.items():
                    if v is not None:
                        sums[k] = sums.get(k, 0.0) + v
            record = {"epoch": epoch, "lr": lr_at(epoch, cfg), "steps": len(batches)}
            record.update({k: v / len(batches) for k, v in sums.items()})
            record["val_dsc"] = None
            last_epoch = epoch == cfg.epochs - 1
            if validate is not None and ((epoch + 1) % max(cfg.val_every, 1) == 0 or last_epoch):
                model.eval()
                record["val_dsc"] = float(validate(model))
                if record["val_dsc"] > best:
                    best = record["val_dsc"]
                    best_path = save_checkpoint(
                        model_checkpoint(model, {"epoch": epoch, "val_dsc": best, "fingerprint": fingerprint}),
                        out / "best.ckpt")
            record["time_s"] = time.perf_counter() - t0
            history.append(record)
            hist_fh.write(json.dumps(record) + "\n")
            hist_fh.flush()
            step_fh.flush()
            log.info("epoch %d loss %.4f val %s (%.1fs)", epoch, record.get("total", float("nan")),
                     record["val_dsc"], record["time_s"])
            meta = {"epoch": epoch, "step": step, "best_val": None if best == -math.inf else best,
                    "history": history, "rng": _rng_meta(rng), "fingerprint": fingerprint}
            ckpt = model_checkpoint(model, meta, optimizer)
            ckpt.tensors["rng/torch"] = torch.get_rng_state()
            save_checkpoint(ckpt, out / "last.ckpt")
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(ckpt, out / f"epoch-{epoch + 1:03d}.ckpt")
    finally:
        hist_fh.close()
        step_fh.close()
    return TrainResult(out / "last.ckpt", best_path, history)


def load_training_cases(run, split: str = "train") -> list[PreparedCase]:
    """Prepared cases from ``train.train_dir``/``val_dir`` or freshly
    generated phantoms (split 0 = train, 1 = validation)."""
    from .data import load_mask_volume, load_volume, phantom_set

    d = run.data
    directory = run.train.train_dir if split == "train" else run.train.val_dir
    if directory:
        pairs = []
        for meta in sorted(Path(directory).glob("*.vol.json")):
            base = meta.with_name(meta.name[: -len(".vol.json")])
            pairs.append((load_volume(base), load_mask_volume(base)))
    else:
        n = d.n_train if split == "train" else d.n_val
        pairs = phantom_set(d.phantom, n, split=0 if split == "train" else 1)
    return [prepare_case(v, m, d.target_spacing, d.normalize_mode) for v, m in pairs]


def load_model(path: str | Path) -> PropNet:
    return build_model(load_checkpoint(path)).eval()
