"""Synthetic phantoms, preprocessing and support/query task sampling."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class VolumeScan:
    voxels: np.ndarray  # (z, y, x), HU-like
    spacing: tuple[float, float, float]  # mm/voxel, (s_z, s_y, s_x)
    id: str = ""

    def __post_init__(self):
        if self.voxels.ndim != 3:
            raise ValueError(f"volume must be 3D, got shape {self.voxels.shape}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing components must be > 0, got {self.spacing}")
        if not np.all(np.isfinite(self.voxels)):
            raise ValueError("volume contains non-finite values")

    @property
    def shape(self):
        return self.voxels.shape


@dataclass(frozen=True)
class MaskVolume:
    voxels: np.ndarray  # (z, y, x) uint8 in {0, 1}
    spacing: tuple[float, float, float]
    id: str = ""

    def __post_init__(self):
        if self.voxels.ndim != 3:
            raise ValueError(f"mask must be 3D, got shape {self.voxels.shape}")
        if self.voxels.size and self.voxels.max(initial=0) > 1:
            raise ValueError("mask values must be 0 or 1")

    @property
    def shape(self):
        return self.voxels.shape


@dataclass(frozen=True)
class SliceTask:
    support_image: np.ndarray
    support_mask: np.ndarray
    query_image: np.ndarray
    query_mask: np.ndarray
    slice_gap: int


@dataclass(frozen=True)
class CropRecord:
    """Window [y0, y0+size) x [x0, x0+size) in the full in-plane grid; may
    extend past the grid (padded with zeros)."""

    y0: int
    x0: int
    size: int
    full_shape: tuple[int, int]


@dataclass
class PhantomConfig:
    shape: tuple[int, int, int] = (32, 96, 96)
    spacing: tuple[float, float, float] = (5.0, 1.2, 1.2)
    lumen_radius_range: tuple[float, float] = (4.0, 6.0)
    wall_thickness_range: tuple[float, float] = (3.0, 5.5)  # tumor wall, voxels
    normal_wall: float = 1.5  # healthy wall thickness, voxels
    angular_extent_range: tuple[float, float] = (150.0, 270.0)  # degrees
    tumor_slices_range: tuple[int, int] = (8, 14)
    deformation_amplitude: float = 0.6  # voxels, per-slice radial jitter
    center_drift: float = 1.0  # voxels, total in-plane drift over the tumor
    background_hu: tuple[float, float] = (-100.0, 15.0)  # (mean, std)
    lumen_hu: tuple[float, float] = (10.0, 10.0)
    wall_hu: tuple[float, float] = (45.0, 12.0)
    tumor_hu: tuple[float, float] = (80.0, 12.0)
    bone_hu: tuple[float, float] = (260.0, 15.0)
    blur_sigma: float = 0.7  # in-plane voxels
    seed: int = 0

    def validate(self):
        if len(self.shape) != 3 or min(self.shape) <= 0:
            raise ConfigError(f"shape must have three positive dims, got {self.shape}")
        if min(self.spacing) <= 0:
            raise ConfigError(f"spacing must be positive, got {self.spacing}")
        for name in ("lumen_radius_range", "wall_thickness_range", "angular_extent_range", "tumor_slices_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ConfigError(f"{name} must satisfy 0 < lo <= hi, got {(lo, hi)}")
        if self.angular_extent_range[1] > 360:
            raise ConfigError("angular extent cannot exceed 360 degrees")
        if self.tumor_slices_range[0] < 3:
            raise ConfigError("tumor must span at least 3 slices")
        if self.tumor_slices_range[1] > self.shape[0]:
            raise ConfigError("tumor extent exceeds the number of slices")
        outer = self.lumen_radius_range[1] + self.wall_thickness_range[1] + self.deformation_amplitude + self.center_drift
        if 2 * outer + 4 > min(self.shape[1:]):
            raise ConfigError("tumor does not fit the in-plane grid")
        if self.deformation_amplitude < 0 or self.center_drift < 0 or self.blur_sigma < 0:
            raise ConfigError("amplitudes must be nonnegative")


def _annulus_profile(n: int) -> np.ndarray:
    # strictly unimodal size profile over the tumor's slices, in (0, 1]
    u = (np.arange(n) + 0.5) / n
    return np.sin(np.pi * u)


@dataclass(frozen=True)
class SliceGeometry:
    """Tumor cross-section on one slice: a partial annulus around
    (center_y, center_x) between ``inner`` and ``outer`` radius (voxels),
    spanning ``bisector +- half_angle`` (radians). ``jitter`` holds
    (amplitude, phase) pairs for harmonics 2, 3, 4 of the outer radius."""

    z: int
    center_y: float
    center_x: float
    inner: float
    outer: float
    bisector: float
    half_angle: float
    jitter: tuple[tuple[float, float], ...] = ()


def tumor_geometry(cfg: PhantomConfig) -> tuple[dict, list[SliceGeometry]]:
    """Draw the random phantom layout; returns (stomach params, tumor slices)."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    Z, Y, X = cfg.shape
    lumen_r = rng.uniform(*cfg.lumen_radius_range)
    thick = rng.uniform(*cfg.wall_thickness_range)
    extent = math.radians(rng.uniform(*cfg.angular_extent_range))
    n_tumor = int(rng.integers(cfg.tumor_slices_range[0], cfg.tumor_slices_range[1] + 1))
    mid_start = (Z - n_tumor) // 2
    z0 = int(rng.integers(max(0, mid_start - 3), min(Z - n_tumor, mid_start + 3) + 1))
    phi0 = rng.uniform(0, 2 * math.pi)
    cy = Y / 2 + rng.uniform(-0.08, 0.08) * Y
    cx = X / 2 + rng.uniform(-0.08, 0.08) * X
    drift_dir = rng.uniform(0, 2 * math.pi)
    profile = _annulus_profile(n_tumor)
    slices = []
    for k in range(n_tumor):
        t = k / max(n_tumor - 1, 1)
        p = profile[k]
        jitter = ()
        if cfg.deformation_amplitude > 0:
            amps = rng.normal(0, cfg.deformation_amplitude / 2, size=3)
            phases = rng.uniform(0, 2 * math.pi, size=3)
            jitter = tuple((float(a), float(ph)) for a, ph in zip(amps, phases))
        slices.append(SliceGeometry(
            z=z0 + k,
            center_y=cy + cfg.center_drift * (t - 0.5) * math.sin(drift_dir),
            center_x=cx + cfg.center_drift * (t - 0.5) * math.cos(drift_dir),
            inner=lumen_r,
            outer=lumen_r + thick * (0.35 + 0.65 * p),
            bisector=phi0 + 0.5 * extent,
            half_angle=min(math.pi, 0.5 * extent * (0.4 + 0.6 * p)),
            jitter=jitter,
        ))
    stomach = {"center_y": cy, "center_x": cx, "lumen_radius": lumen_r}
    return stomach, slices


def rasterize_sector(g: SliceGeometry, shape_yx: tuple[int, int]) -> np.ndarray:
    Y, X = shape_yx
    yy, xx = np.mgrid[0:Y, 0:X].astype(np.float64)
    dist = np.hypot(yy - g.center_y, xx - g.center_x)
    ang = np.arctan2(yy - g.center_y, xx - g.center_x)
    outer = np.full_like(dist, g.outer)
    for j, (a, ph) in enumerate(g.jitter):
        outer += a * np.cos((j + 2) * ang + ph)
    # angular offset from the bisector, wrapped to [0, pi]
    dang = np.abs(np.angle(np.exp(1j * (ang - g.bisector))))
    return ((dist >= g.inner) & (dist < outer) & (dang <= g.half_angle)).astype(np.uint8)


def synth_volume(cfg: PhantomConfig) -> tuple[VolumeScan, MaskVolume]:
    """Generate one phantom: a stomach-like ring whose wall is thickened by a
    partial-annulus tumor over a run of slices.

    The tumor's radial thickness and angular extent follow a unimodal profile
    along z; its outer radius carries low-order Fourier jitter per slice.
    Intensities are drawn per tissue class, blurred in-plane and noised, then
    kept inside (-200, 300).
    """
    stomach, tumor = tumor_geometry(cfg)
    rng = np.random.default_rng([cfg.seed, 1])
    Z, Y, X = cfg.shape
    yy, xx = np.mgrid[0:Y, 0:X].astype(np.float64)
    by_z = {g.z: g for g in tumor}
    labels = np.zeros(cfg.shape, dtype=np.uint8)  # 0 bg, 1 lumen, 2 wall, 3 tumor, 4 bone
    mask = np.zeros(cfg.shape, dtype=np.uint8)
    bone = (yy - 0.85 * Y) ** 2 + (xx - 0.5 * X) ** 2 < (0.06 * Y) ** 2
    first, last = tumor[0], tumor[-1]
    for z in range(Z):
        g = by_z.get(z)
        ref = g or (first if z < first.z else last)
        dist = np.hypot(yy - ref.center_y, xx - ref.center_x)
        sl = labels[z]
        sl[bone] = 4
        sl[dist < stomach["lumen_radius"] + cfg.normal_wall] = 2
        sl[dist < stomach["lumen_radius"]] = 1
        if g is not None:
            m = rasterize_sector(g, (Y, X))
            sl[m > 0] = 3
            mask[z] = m

    means = np.array([cfg.background_hu[0], cfg.lumen_hu[0], cfg.wall_hu[0], cfg.tumor_hu[0], cfg.bone_hu[0]])
    stds = np.array([cfg.background_hu[1], cfg.lumen_hu[1], cfg.wall_hu[1], cfg.tumor_hu[1], cfg.bone_hu[1]])
    vox = means[labels]
    if cfg.blur_sigma > 0:
        vox = ndimage.gaussian_filter(vox, sigma=(0, cfg.blur_sigma, cfg.blur_sigma), mode="nearest")
    vox = vox + rng.normal(size=vox.shape) * stds[labels]
    vox = np.clip(vox, -199.0, 299.0).astype(np.float32)
    name = f"phantom-{cfg.seed}"
    spacing = tuple(float(s) for s in cfg.spacing)
    return VolumeScan(vox, spacing, name), MaskVolume(mask, spacing, name)


def phantom_set(base: PhantomConfig, count: int, split: int = 0) -> list[tuple[VolumeScan, MaskVolume]]:
    """``count`` phantoms with per-case seeds derived from (base.seed, split, i)."""
    out = []
    for i in range(count):
        seed = int(np.random.SeedSequence([base.seed, split, i]).generate_state(1)[0])
        vol, msk = synth_volume(replace(base, seed=seed))
        name = f"{'train' if split == 0 else 'val' if split == 1 else f's{split}'}-{i:03d}"
        out.append((replace(vol, id=name), replace(msk, id=name)))
    return out


# -- preprocessing -----------------------------------------------------------

def zoom_xy(arr: np.ndarray, out_hw: tuple[int, int], order: int) -> np.ndarray:
    Y, X = arr.shape[-2:]
    if (Y, X) == tuple(out_hw):
        return arr.copy()
    factors = (1.0,) * (arr.ndim - 2) + (out_hw[0] / Y, out_hw[1] / X)
    return ndimage.zoom(arr, factors, order=order, mode="nearest", grid_mode=True)


def resample_xy(vol: VolumeScan, mask: MaskVolume | None, target_xy_spacing: float,
                out_shape: tuple[int, int] | None = None):
    """Resample in-plane to ``target_xy_spacing`` mm (bilinear image, nearest
    mask). ``out_shape`` pins the output grid, e.g. to invert a resample."""
    if target_xy_spacing <= 0:
        raise ValueError("target spacing must be > 0")
    sz, sy, sx = vol.spacing
    _, Y, X = vol.shape
    if out_shape is None:
        out_shape = (int(round(Y * sy / target_xy_spacing)), int(round(X * sx / target_xy_spacing)))
    if min(out_shape) < 8:
        raise ValueError(f"resampled in-plane size {out_shape} is degenerate (< 8x8)")
    spacing = (sz, float(target_xy_spacing), float(target_xy_spacing))
    img = zoom_xy(vol.voxels, out_shape, order=1).astype(vol.voxels.dtype, copy=False)
    new_vol = VolumeScan(img, spacing, vol.id)
    if mask is None:
        return new_vol, None
    m = zoom_xy(mask.voxels, out_shape, order=0).astype(np.uint8, copy=False)
    return new_vol, MaskVolume(m, spacing, mask.id)


def normalize_array(x: np.ndarray, mode: str = "paper") -> np.ndarray:
    """Window normalization around level 75, width 250.

    ``paper``: voxels outside the open window (-50, 200) are zeroed before the
    +50 shift and /250 scaling. ``clip``: conventional clipping to the window.
    """
    x = np.asarray(x, dtype=np.float32)
    if mode == "paper":
        inside = (x > -50) & (x < 200)
        return ((x * inside + 50.0) / 250.0).astype(np.float32)
    if mode == "clip":
        return ((np.clip(x, -50.0, 200.0) + 50.0) / 250.0).astype(np.float32)
    raise ValueError(f"unknown normalize mode {mode!r}")


def normalize(vol: VolumeScan, mode: str = "paper") -> VolumeScan:
    return VolumeScan(normalize_array(vol.voxels, mode), vol.spacing, vol.id)


def mask_centroid(mask2d: np.ndarray) -> tuple[float, float]:
    ys, xs = np.nonzero(mask2d)
    if ys.size == 0:
        raise ValueError("no annotation on support slice")
    return float(ys.mean()), float(xs.mean())


def _round_half_down(v: float) -> int:
    return int(math.ceil(v - 0.5))


def crop_window(mask2d: np.ndarray, size: int, shift: tuple[int, int] = (0, 0)) -> CropRecord:
    cy, cx = mask_centroid(mask2d)
    y0 = _round_half_down(cy) - size // 2 + shift[0]
    x0 = _round_half_down(cx) - size // 2 + shift[1]
    return CropRecord(y0, x0, size, tuple(mask2d.shape))


def crop_array(arr: np.ndarray, rec: CropRecord) -> np.ndarray:
    """Crop the last two axes with zero padding outside the grid."""
    Y, X = arr.shape[-2:]
    out = np.zeros(arr.shape[:-2] + (rec.size, rec.size), dtype=arr.dtype)
    ys, ye = max(rec.y0, 0), min(rec.y0 + rec.size, Y)
    xs, xe = max(rec.x0, 0), min(rec.x0 + rec.size, X)
    if ys < ye and xs < xe:
        out[..., ys - rec.y0:ye - rec.y0, xs - rec.x0:xe - rec.x0] = arr[..., ys:ye, xs:xe]
    return out


def uncrop_array(arr: np.ndarray, rec: CropRecord) -> np.ndarray:
    """Inverse of :func:`crop_array` for in-bounds pixels; the rest is 0."""
    if arr.shape[-2:] != (rec.size, rec.size):
        raise ValueError(f"cropped array {arr.shape[-2:]} does not match record size {rec.size}")
    Y, X = rec.full_shape
    out = np.zeros(arr.shape[:-2] + (Y, X), dtype=arr.dtype)
    ys, ye = max(rec.y0, 0), min(rec.y0 + rec.size, Y)
    xs, xe = max(rec.x0, 0), min(rec.x0 + rec.size, X)
    if ys < ye and xs < xe:
        out[..., ys:ye, xs:xe] = arr[..., ys - rec.y0:ye - rec.y0, xs - rec.x0:xe - rec.x0]
    return out


def crop_around(vol: VolumeScan, mask: MaskVolume, support_index: int, size: int):
    """Crop every slice with one window centred on the support slice's tumor
    centroid (ties round toward -inf)."""
    rec = crop_window(mask.voxels[support_index], size)
    return (
        VolumeScan(crop_array(vol.voxels, rec), vol.spacing, vol.id),
        MaskVolume(crop_array(mask.voxels, rec), mask.spacing, mask.id),
        rec,
    )


# -- task sampling -----------------------------------------------------------

QUERY_GAPS = (-2, -1, 1, 2)


def _reflect(z: int, n: int) -> int:
    if n == 1:
        return 0
    period = 2 * (n - 1)
    z = z % period
    return z if z < n else period - z


def query_indices(support: int, n_slices: int) -> list[int]:
    return [_reflect(support + g, n_slices) for g in QUERY_GAPS]


def sample_training_tasks(vol: VolumeScan, mask: MaskVolume, rng: np.random.Generator,
                          crop_size: int | None = None, center_jitter: int = 0) -> list[SliceTask]:
    """One support slice (uniform over annotated slices) and its four nearest
    neighbours (+-1, +-2, reflected into range) as queries.

    With ``crop_size`` all five slices are cropped around the support
    centroid, shifted by up to ``center_jitter`` pixels per axis.
    """
    if vol.shape != mask.shape:
        raise ValueError("volume and mask shapes differ")
    Z = vol.shape[0]
    if Z < 3:
        raise ValueError("need at least 3 slices to sample queries")
    annotated = np.flatnonzero(mask.voxels.reshape(Z, -1).any(axis=1))
    if annotated.size == 0:
        raise ValueError("volume has an empty mask")
    s = int(annotated[rng.integers(annotated.size)])
    img, msk = vol.voxels, mask.voxels
    if crop_size is not None:
        shift = tuple(int(v) for v in rng.integers(-center_jitter, center_jitter + 1, size=2)) if center_jitter else (0, 0)
        rec = crop_window(msk[s], crop_size, shift)
        idx = [s] + query_indices(s, Z)
        img = dict(zip(idx, crop_array(img[idx], rec)))
        msk = dict(zip(idx, crop_array(msk[idx], rec)))
    return [
        SliceTask(img[s], msk[s], img[q], msk[q], q - s)
        for q in query_indices(s, Z)
    ]


# -- volume container --------------------------------------------------------

def _sidecar(path_base: Path, kind: str) -> Path:
    return path_base.with_name(path_base.name + f".{kind}.json")


def save_volume(vol: VolumeScan, base: str | Path, extra: dict | None = None) -> None:
    base = Path(base)
    base.parent.mkdir(parents=True, exist_ok=True)
    vol.voxels.astype("<f4").tofile(base.with_name(base.name + ".vol.raw"))
    meta = {"shape": list(vol.shape), "spacing_mm": list(vol.spacing), "dtype": "f32", "id": vol.id}
    meta.update(extra or {})
    _sidecar(base, "vol").write_text(json.dumps(meta, indent=1))


def save_mask(mask: MaskVolume | np.ndarray, base: str | Path, spacing=None, id: str = "",
              extra: dict | None = None) -> None:
    """Masks may be 3D volumes or 2D slices (seed annotations, whose sidecar
    records ``slice_index`` via ``extra``)."""
    base = Path(base)
    base.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(mask, MaskVolume):
        arr, spacing, id = mask.voxels, mask.spacing, mask.id
    else:
        arr = np.asarray(mask)
    arr.astype(np.uint8).tofile(base.with_name(base.name + ".mask.raw"))
    meta = {"shape": list(arr.shape), "spacing_mm": list(spacing), "dtype": "u8", "id": id}
    meta.update(extra or {})
    _sidecar(base, "mask").write_text(json.dumps(meta, indent=1))


def _strip(path: str | Path, kind: str) -> Path:
    p = Path(path)
    for suffix in (f".{kind}.raw", f".{kind}.json"):
        if p.name.endswith(suffix):
            return p.with_name(p.name[: -len(suffix)])
    return p


def read_meta(path: str | Path, kind: str) -> dict:
    return json.loads(_sidecar(_strip(path, kind), kind).read_text())


def load_volume(path: str | Path) -> VolumeScan:
    base = _strip(path, "vol")
    meta = read_meta(base, "vol")
    if meta.get("dtype") != "f32":
        raise ValueError(f"unsupported volume dtype {meta.get('dtype')!r}")
    arr = np.fromfile(base.with_name(base.name + ".vol.raw"), dtype="<f4").reshape(meta["shape"])
    return VolumeScan(arr.astype(np.float32), tuple(meta["spacing_mm"]), meta.get("id", base.name))


def load_mask(path: str | Path) -> tuple[np.ndarray, dict]:
    base = _strip(path, "mask")
    meta = read_meta(base, "mask")
    if meta.get("dtype") != "u8":
        raise ValueError(f"unsupported mask dtype {meta.get('dtype')!r}")
    arr = np.fromfile(base.with_name(base.name + ".mask.raw"), dtype=np.uint8).reshape(meta["shape"])
    return arr, meta


def load_mask_volume(path: str | Path) -> MaskVolume:
    arr, meta = load_mask(path)
    return MaskVolume(arr, tuple(meta["spacing_mm"]), meta.get("id", ""))
