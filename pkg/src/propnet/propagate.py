"""Up-down iterative propagation of a single annotated slice through a volume."""
from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np
import torch
from scipy import ndimage

from .data import (CropRecord, MaskVolume, VolumeScan, crop_array, crop_window,
                   normalize_array, resample_xy, uncrop_array, zoom_xy)

BINARIZE_AT = 0.5


@dataclass
class PropagationConfig:
    interval_mm: float = 20.0
    tau_fraction: float = 1 / 20
    parallel: bool = True
    max_iterations: int = 64
    crop_size: int = 64
    mcc: bool = True
    connectivity: int = 26

    def __post_init__(self):
        if self.interval_mm <= 0:
            raise ValueError("interval_mm must be > 0")
        if not 0 < self.tau_fraction < 1:
            raise ValueError("tau_fraction must lie in (0, 1)")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.connectivity not in (6, 26):
            raise ValueError("connectivity must be 6 or 26")


class SlicePredictor(Protocol):
    def __call__(self, support_image: np.ndarray, support_mask: np.ndarray,
                 query_images: np.ndarray) -> np.ndarray:
        """Return (n, H, W) foreground probabilities for n query slices."""


class ModelPredictor:
    """Adapts a PropNet to the SlicePredictor protocol (eval mode, no grad)."""

    def __init__(self, model, dtype=torch.float32):
        self.model = model.eval()
        self.dtype = dtype

    def __call__(self, support_image, support_mask, query_images):
        t = lambda a: torch.as_tensor(np.ascontiguousarray(a), dtype=self.dtype)
        with torch.no_grad():
            out = self.model.predict_queries(t(support_image), t(support_mask), t(query_images))
        return out.numpy()


def compute_interval(spacing_z: float, interval_mm: float = 20.0) -> int:
    """Slices per propagation jump: max(1, floor(interval_mm / spacing_z))."""
    if spacing_z <= 0:
        raise ValueError("spacing_z must be > 0")
    return max(1, math.floor(interval_mm / spacing_z))


def compute_tau(support_mask: np.ndarray, fraction: float = 1 / 20) -> float:
    area = int(np.count_nonzero(support_mask))
    if area == 0:
        raise ValueError("support mask is empty")
    return area * fraction


@dataclass
class FrontStep:
    support: int
    queries: list[int]
    support_area: int
    terminated: str | None = None  # "area", "edge" or "max_iterations"


@dataclass
class PropagationResult:
    mask3d: MaskVolume
    per_slice_area: list[int]
    front_trace: dict[str, list[FrontStep]]
    tau: float
    interval: int
    wall_time: float = 0.0
    source: dict[int, int] = field(default_factory=dict)  # slice -> support that predicted it

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "interval": self.interval,
            "wall_time_s": self.wall_time,
            "per_slice_area": self.per_slice_area,
            "front_trace": {k: [vars(s) for s in v] for k, v in self.front_trace.items()},
        }


def _run_front(predict: SlicePredictor, images: np.ndarray, seed_index: int, seed_mask: np.ndarray,
               direction: int, interval: int, tau: float, max_iterations: int):
    Z = images.shape[0]
    support, support_mask = seed_index, seed_mask
    masks: dict[int, np.ndarray] = {}
    source: dict[int, int] = {}
    trace: list[FrontStep] = []
    for _ in range(max_iterations):
        queries = [support + direction * k for k in range(1, interval + 1)]
        queries = [q for q in queries if 0 <= q < Z]
        if not queries:
            trace.append(FrontStep(support, [], int(support_mask.sum()), "edge"))
            return masks, source, trace
        probs = predict(images[support], support_mask, images[queries])
        step = FrontStep(support, queries, int(support_mask.sum()))
        trace.append(step)
        for q, p in zip(queries, probs):
            masks[q] = (p >= BINARIZE_AT).astype(np.uint8)
            source[q] = support
        frontier = queries[-1]
        if masks[frontier].sum() < tau:
            step.terminated = "area"
            return masks, source, trace
        if frontier in (0, Z - 1):
            step.terminated = "edge"
            return masks, source, trace
        support, support_mask = frontier, masks[frontier]
    trace[-1].terminated = "max_iterations"
    return masks, source, trace


def propagate(predict: SlicePredictor, vol: VolumeScan, seed_index: int, seed_mask: np.ndarray,
              cfg: PropagationConfig | None = None) -> PropagationResult:
    """Propagate ``seed_mask`` on slice ``seed_index`` through ``vol``.

    ``vol`` holds the images exactly as the predictor consumes them. Each
    front (up: decreasing z, down: increasing z) jumps ``interval`` slices
    per iteration, predicting the slices between its current support
    (exclusive) and the next support (inclusive). A front stops once its new
    support's area falls below tau, at the volume edge, or after
    ``max_iterations`` jumps. The seed slice keeps the given mask.
    """
    cfg = cfg or PropagationConfig()
    images = vol.voxels
    Z = images.shape[0]
    if not 0 <= seed_index < Z:
        raise ValueError(f"seed index {seed_index} out of range [0, {Z})")
    seed_mask = (np.asarray(seed_mask) > 0).astype(np.uint8)
    if seed_mask.shape != images.shape[1:]:
        raise ValueError("seed mask shape does not match the slice shape")
    tau = compute_tau(seed_mask, cfg.tau_fraction)
    interval = compute_interval(vol.spacing[0], cfg.interval_mm)

    t0 = time.perf_counter()
    fronts = {"up": -1, "down": 1}
    args = lambda d: (predict, images, seed_index, seed_mask, d, interval, tau, cfg.max_iterations)
    if cfg.parallel:
        with ThreadPoolExecutor(max_workers=2) as pool:
            futures = {name: pool.submit(_run_front, *args(d)) for name, d in fronts.items()}
            results = {name: f.result() for name, f in futures.items()}
    else:
        results = {name: _run_front(*args(d)) for name, d in fronts.items()}
    wall = time.perf_counter() - t0

    out = np.zeros(images.shape, dtype=np.uint8)
    source: dict[int, int] = {}
    for masks, src, _ in results.values():
        for z, m in masks.items():
            out[z] = m
        source.update(src)
    out[seed_index] = seed_mask
    return PropagationResult(
        mask3d=MaskVolume(out, vol.spacing, vol.id),
        per_slice_area=[int(a) for a in out.reshape(Z, -1).sum(axis=1)],
        front_trace={name: r[2] for name, r in results.items()},
        tau=tau,
        interval=interval,
        wall_time=wall,
        source=source,
    )


def mcc_filter(mask3d: MaskVolume | np.ndarray, connectivity: int = 26):
    """Keep the largest connected foreground component.

    Equal-sized components resolve to the one whose first voxel in (z, y, x)
    order comes first. Returns the same type it was given.
    """
    arr = mask3d.voxels if isinstance(mask3d, MaskVolume) else np.asarray(mask3d)
    if connectivity not in (6, 26):
        raise ValueError("connectivity must be 6 or 26")
    struct = ndimage.generate_binary_structure(3, 1 if connectivity == 6 else 3)
    # scipy numbers components in raster order of their first voxel
    labels, n = ndimage.label(arr > 0, structure=struct)
    if n == 0:
        out = np.zeros_like(arr, dtype=np.uint8)
    else:
        sizes = np.bincount(labels.ravel())[1:]
        out = (labels == int(np.argmax(sizes)) + 1).astype(np.uint8)
    if isinstance(mask3d, MaskVolume):
        return MaskVolume(out, mask3d.spacing, mask3d.id)
    return out


def assemble_full(mask3d: MaskVolume | np.ndarray, rec: CropRecord) -> np.ndarray:
    """Map a cropped-frame prediction back onto the full in-plane grid."""
    arr = mask3d.voxels if isinstance(mask3d, MaskVolume) else np.asarray(mask3d)
    if rec.size <= 0 or len(rec.full_shape) != 2:
        raise ValueError(f"inconsistent crop record {rec}")
    return uncrop_array(arr, rec)


@dataclass
class Segmentation:
    mask: MaskVolume  # original grid
    result: PropagationResult
    crop: CropRecord


def segment_volume(predict: SlicePredictor, vol: VolumeScan, seed_index: int, seed_mask: np.ndarray,
                   cfg: PropagationConfig | None = None, target_spacing: float = 0.6,
                   normalize_mode: str = "paper") -> Segmentation:
    """Full inference path on a raw volume and an original-grid seed mask:
    resample, normalize, crop around the seed, propagate, optional MCC,
    uncrop and resample back to the original grid."""
    cfg = cfg or PropagationConfig()
    Z, Y, X = vol.shape
    seed_vol = MaskVolume(np.asarray(seed_mask, dtype=np.uint8)[None], vol.spacing, vol.id)
    seed_only = VolumeScan(np.zeros((1, Y, X), np.float32), vol.spacing, vol.id)
    rvol, _ = resample_xy(vol, None, target_spacing)
    _, rseed = resample_xy(seed_only, seed_vol, target_spacing)
    rec = crop_window(rseed.voxels[0], cfg.crop_size)
    images = crop_array(normalize_array(rvol.voxels, normalize_mode), rec)
    cvol = VolumeScan(images, rvol.spacing, vol.id)
    result = propagate(predict, cvol, seed_index, crop_array(rseed.voxels[0], rec), cfg)
    pred = result.mask3d
    if cfg.mcc:
        pred = mcc_filter(pred, cfg.connectivity)
    full = assemble_full(pred, rec)
    orig = zoom_xy(full, (Y, X), order=0).astype(np.uint8)
    return Segmentation(MaskVolume(orig, vol.spacing, vol.id), result, rec)
