"""Slow, obviously-correct reference implementations used as test oracles."""
from __future__ import annotations

import math
from collections import deque

import numpy as np


def boundary_oracle(y: np.ndarray, E: int) -> np.ndarray:
    """Keep p iff y(p)=1 and some q with |q-p|_inf <= E//2 is background
    (outside the image counts as background)."""
    r = E // 2
    H, W = y.shape
    out = np.zeros_like(y)
    for i in range(H):
        for j in range(W):
            if not y[i, j]:
                continue
            found = False
            for di in range(-r, r + 1):
                for dj in range(-r, r + 1):
                    a, b = i + di, j + dj
                    if not (0 <= a < H and 0 <= b < W) or not y[a, b]:
                        found = True
                        break
                if found:
                    break
            out[i, j] = found
    return out


FACE = [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)]


def surface_points(m: np.ndarray) -> list[tuple[int, int, int]]:
    Z, Y, X = m.shape
    pts = []
    for z in range(Z):
        for y in range(Y):
            for x in range(X):
                if not m[z, y, x]:
                    continue
                for dz, dy, dx in FACE:
                    a, b, c = z + dz, y + dy, x + dx
                    if not (0 <= a < Z and 0 <= b < Y and 0 <= c < X) or not m[a, b, c]:
                        pts.append((z, y, x))
                        break
    return pts


def surface_dice_oracle(a: np.ndarray, b: np.ndarray, tol: float, spacing) -> float:
    sa, sb = surface_points(a), surface_points(b)
    if not sa and not sb:
        return 1.0
    sp = np.asarray(spacing, dtype=np.float64)
    pa = np.asarray(sa, dtype=np.float64).reshape(-1, 3) * sp
    pb = np.asarray(sb, dtype=np.float64).reshape(-1, 3) * sp

    def within(src, dst):
        if len(dst) == 0:
            return 0
        d = np.sqrt(((src[:, None, :] - dst[None, :, :]) ** 2).sum(-1)).min(axis=1)
        return int((d <= tol + 1e-9).sum())

    return (within(pa, pb) + within(pb, pa)) / (len(pa) + len(pb))


def neighbours(connectivity: int):
    offs = []
    for dz in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                n = abs(dz) + abs(dy) + abs(dx)
                if n == 0 or (connectivity == 6 and n > 1):
                    continue
                offs.append((dz, dy, dx))
    return offs


def mcc_oracle(m: np.ndarray, connectivity: int = 26) -> np.ndarray:
    """Breadth-first flood fill in raster order; the first-found component
    wins ties."""
    m = m.astype(bool)
    seen = np.zeros_like(m)
    best: list = []
    offs = neighbours(connectivity)
    Z, Y, X = m.shape
    for start in zip(*np.nonzero(m)):
        if seen[start]:
            continue
        comp, queue = [], deque([start])
        seen[start] = True
        while queue:
            p = queue.popleft()
            comp.append(p)
            for d in offs:
                q = (p[0] + d[0], p[1] + d[1], p[2] + d[2])
                if 0 <= q[0] < Z and 0 <= q[1] < Y and 0 <= q[2] < X and m[q] and not seen[q]:
                    seen[q] = True
                    queue.append(q)
        if len(comp) > len(best):
            best = comp
    out = np.zeros(m.shape, np.uint8)
    for p in best:
        out[p] = 1
    return out


def t_test_oracle(x, y) -> tuple[float, float]:
    """Textbook paired t: t = mean(d) / (sd(d) / sqrt(n)), two-sided p from
    the Student-t CDF via the regularized incomplete beta function."""
    from scipy.special import betainc

    d = [a - b for a, b in zip(x, y)]
    n = len(d)
    mean = math.fsum(d) / n
    var = math.fsum((v - mean) ** 2 for v in d) / (n - 1)
    t = mean / math.sqrt(var / n)
    df = n - 1
    p = float(betainc(df / 2, 0.5, df / (df + t * t)))
    return t, p


def central_difference(f, a: np.ndarray, k: int, eps: float = 1e-5) -> float:
    ap, am = a.copy(), a.copy()
    ap.flat[k] += eps
    am.flat[k] -= eps
    return (f(ap) - f(am)) / (2 * eps)
