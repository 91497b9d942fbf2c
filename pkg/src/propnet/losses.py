"""Training objectives: boundary targets, soft Dice, hard-pixel-masked Dice
and the two-stage weighted total."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

W_C, W_R, W_B = 1.0, 0.5, 0.5


@dataclass(frozen=True)
class LossWeights:
    w: float
    w_prime: float
    w_c: float = W_C
    w_r: float = W_R
    w_b: float = W_B


def stage_weights(n: float, T: float) -> LossWeights:
    """Proposing weight max(0.5, 1 - n/T), refining weight min(1, n/T)."""
    if n < 0 or T <= 0:
        raise ValueError("need n >= 0 and T > 0")
    return LossWeights(max(0.5, 1.0 - n / T), min(1.0, n / T))


# -- boundary ground truth ---------------------------------------------------

def _check_kernel(E: int, kernel: str):
    if E < 1 or E % 2 == 0:
        raise ValueError(f"erosion kernel size must be odd and >= 1, got {E}")
    if kernel not in ("square", "cross"):
        raise ValueError(f"unknown erosion kernel {kernel!r}")


def structuring_element(E: int, kernel: str = "square") -> np.ndarray:
    _check_kernel(E, kernel)
    if kernel == "square":
        return np.ones((E, E), dtype=bool)
    se = np.zeros((E, E), dtype=bool)
    se[E // 2, :] = se[:, E // 2] = True
    return se


def boundary_gt(y, E: int = 9, kernel: str = "square"):
    """Inner boundary band y - erode(y, E x E). Pixels outside the image count
    as background, so foreground touching the border lands in the band.

    Accepts a numpy (H, W) array or a torch tensor (H, W) / (B, H, W).
    """
    _check_kernel(E, kernel)
    if isinstance(y, torch.Tensor):
        return _boundary_torch(y, E, kernel)
    from scipy import ndimage

    y = np.asarray(y).astype(bool)
    eroded = ndimage.binary_erosion(y, structure=structuring_element(E, kernel), border_value=0)
    return (y & ~eroded).astype(np.uint8)


def _boundary_torch(y: torch.Tensor, E: int, kernel: str) -> torch.Tensor:
    squeeze = y.dim() == 2
    yb = (y.unsqueeze(0) if squeeze else y).unsqueeze(1).float()
    r = E // 2
    bg = F.pad(1.0 - yb, (r, r, r, r), value=1.0)
    if kernel == "square":
        near_bg = F.max_pool2d(bg, E, stride=1)
    else:
        near_bg = torch.maximum(F.max_pool2d(bg, (1, E), stride=1)[..., r:-r or None, :],
                                F.max_pool2d(bg, (E, 1), stride=1)[..., :, r:-r or None])
    band = (yb * near_bg).squeeze(1)
    return band.squeeze(0) if squeeze else band


# -- Dice losses -------------------------------------------------------------

def _check_shapes(a, b, h=None):
    if tuple(a.shape) != tuple(b.shape) or (h is not None and tuple(h.shape) != tuple(a.shape)):
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}"
                         + ("" if h is None else f" vs {tuple(h.shape)}"))


def soft_dice(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """1 - 2|a*b| / (|a| + |b|) over the last two axes; 0 when both are empty.

    Returns a scalar for 2D inputs, a (B,) tensor for batches.
    """
    _check_shapes(a, b)
    b = b.to(a.dtype)
    inter = (a * b).sum(dim=(-2, -1))
    denom = a.sum(dim=(-2, -1)) + b.sum(dim=(-2, -1))
    empty = denom == 0
    safe = torch.where(empty, torch.ones_like(denom), denom)
    return torch.where(empty, torch.zeros_like(denom), 1.0 - 2.0 * inter / safe)


def masked_soft_dice(a: torch.Tensor, b: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
    """Soft Dice restricted to pixels with h == 1; 0 when nothing is selected
    or both restricted sums vanish. ``h`` is treated as a constant."""
    _check_shapes(a, b, h)
    h = h.detach().to(a.dtype)
    return soft_dice(a * h, b.to(a.dtype) * h)


def soft_dice_grad(a: np.ndarray, b: np.ndarray, h: np.ndarray | None = None) -> np.ndarray:
    """Closed-form d(loss)/d(a) for soft_dice (or masked_soft_dice with h)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    h = np.ones_like(a) if h is None else np.asarray(h, dtype=np.float64)
    S = np.sum(a * b * h)
    D = np.sum(a * h) + np.sum(b * h)
    if D == 0:
        return np.zeros_like(a)
    return h * (-2.0 * b / D + 2.0 * S / D ** 2)


def hard_pixel_mask(loss_map: torch.Tensor) -> torch.Tensor:
    """Per image, flag the ceil(N/3) pixels with the largest loss.

    Ties at the cut-off prefer lower row-major indices. Works on (H, W) or
    (B, H, W); returns a float {0, 1} tensor of the same shape.
    """
    squeeze = loss_map.dim() == 2
    lm = loss_map.detach()
    lm = lm.unsqueeze(0) if squeeze else lm
    B = lm.shape[0]
    flat = lm.reshape(B, -1)
    k = math.ceil(flat.shape[1] / 3)
    # stable descending sort keeps index order among equal values
    order = torch.sort(flat, dim=1, descending=True, stable=True).indices[:, :k]
    h = torch.zeros_like(flat)
    h.scatter_(1, order, 1.0)
    h = h.reshape(lm.shape)
    return h.squeeze(0) if squeeze else h


# -- total objective ---------------------------------------------------------

TERMS = ("L_c", "L_r", "L_b", "L_c_ref", "L_r_ref", "L_b_ref")


def _pooled(t: torch.Tensor) -> torch.Tensor:
    # (B, H, W) -> one (B*H, W) image so sums run over the whole batch
    return t.reshape(-1, t.shape[-1]) if t.dim() == 3 else t


def total_loss(propose, refine, y_q: torch.Tensor, E: int = 9, n: float = 0, T: float = 40,
               kernel: str = "square", reduction: str = "batch"):
    """Weighted two-stage loss.

    ``propose``/``refine`` are StageOutputs (``refine`` may be None). The
    refining terms use Dice masked to the hardest third of pixels by the
    proposing composite's per-pixel error |y_c - y_q| (selected per image).
    Heads that are absent (boundary branch disabled) contribute no term.

    ``reduction="batch"`` evaluates each Dice term once over all pixels of the
    batch, so predictions on query slices with an empty target still receive
    gradient; ``"image"`` averages per-image Dice values. Returns (total,
    breakdown) with float values for every term plus w, w'.
    """
    if reduction not in ("batch", "image"):
        raise ValueError(f"unknown reduction {reduction!r}")
    pool = _pooled if reduction == "batch" else (lambda t: t)
    y_q = y_q.to(propose.y_c.dtype)
    wts = stage_weights(n, T)
    y_b = boundary_gt(y_q, E, kernel)
    terms: dict[str, torch.Tensor | None] = dict.fromkeys(TERMS)
    dice = lambda a, b: soft_dice(pool(a), pool(b)).mean()
    mdice = lambda a, b, h: masked_soft_dice(pool(a), pool(b), pool(h)).mean()
    terms["L_c"] = dice(propose.y_c, y_q)
    if propose.y_b is not None:
        terms["L_r"] = dice(propose.y_r, y_q)
        terms["L_b"] = dice(propose.y_b, y_b)

    def stage_sum(c, r, b):
        out = wts.w_c * c
        if r is not None:
            out = out + wts.w_r * r
        if b is not None:
            out = out + wts.w_b * b
        return out

    total = wts.w * stage_sum(terms["L_c"], terms["L_r"], terms["L_b"])
    if refine is not None:
        h = hard_pixel_mask((propose.y_c - y_q).abs())
        terms["L_c_ref"] = mdice(refine.y_c, y_q, h)
        if refine.y_b is not None:
            terms["L_r_ref"] = mdice(refine.y_r, y_q, h)
            terms["L_b_ref"] = mdice(refine.y_b, y_b, h)
        if wts.w_prime > 0:
            total = total + wts.w_prime * stage_sum(terms["L_c_ref"], terms["L_r_ref"], terms["L_b_ref"])
    breakdown = {k: (None if v is None else float(v.detach())) for k, v in terms.items()}
    breakdown.update(w=wts.w, w_prime=wts.w_prime, total=float(total.detach()))
    return total, breakdown
