"""Binary masks: contour tracing, polygon fill, contour-shrinking augmentation.

Masks are ``(H, W)`` arrays of 0/1.  Contours are ``(n, 2)`` int arrays of
``(x, y)`` pixel coordinates forming a closed, 8-connected loop.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage.morphology import medial_axis

from .errors import UsageError

# clockwise on screen (y down), starting west: W, NW, N, NE, E, SE, S, SW
_RING = [(0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1)]
_RING_INDEX = {d: i for i, d in enumerate(_RING)}
_EIGHT = np.ones((3, 3), dtype=bool)

MIN_COMPONENT = 3


def as_mask(m) -> np.ndarray:
    m = np.asarray(m)
    if m.ndim == 3 and m.shape[-1] == 1:
        m = m[..., 0]
    if m.ndim != 2:
        raise UsageError(f"mask must be 2-D, got shape {m.shape}")
    return (m > 0.5).astype(np.uint8)


def signed_area(contour: np.ndarray) -> float:
    """Shoelace area with the y axis pointing up (positive = counterclockwise)."""
    x = contour[:, 0].astype(np.float64)
    y = -contour[:, 1].astype(np.float64)
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _moore(padded: np.ndarray, start: tuple[int, int]) -> list[tuple[int, int]]:
    """Moore-neighbour boundary walk (row, col coords).

    Stops by Jacob's criterion (start re-entered from the west), or when the
    first edge ``start -> points[1]`` is about to be walked a second time,
    which covers starts that are only re-entered diagonally.
    """
    points = [start]
    p, back = start, 0  # entered from the west: raster scan guarantees it is background
    limit = 8 * int(padded.sum()) + 16
    for _ in range(limit):
        for k in range(1, 9):
            d = (back + k) % 8
            q = (p[0] + _RING[d][0], p[1] + _RING[d][1])
            if padded[q]:
                prev = _RING[(d - 1) % 8]
                back = _RING_INDEX[(p[0] + prev[0] - q[0], p[1] + prev[1] - q[1])]
                break
        else:
            return points  # isolated pixel
        if p == start and len(points) > 2 and q == points[1]:
            return points[:-1]
        p = q
        if p == start and back == 0:
            return points
        points.append(p)
    raise RuntimeError("contour walk did not terminate")


def trace_contours(mask, min_size: int = MIN_COMPONENT, drop_small: bool = False) -> list[np.ndarray]:
    """Outer boundary of every 8-connected component, counterclockwise.

    Components whose bounding box is smaller than ``min_size`` in either
    direction raise ``UsageError`` unless ``drop_small`` is set.
    """
    m = as_mask(mask)
    if not m.any():
        raise UsageError("cannot trace an empty mask")
    labels, n = ndimage.label(m, structure=_EIGHT)
    out = []
    for idx, sl in enumerate(ndimage.find_objects(labels), start=1):
        hh, ww = sl[0].stop - sl[0].start, sl[1].stop - sl[1].start
        if hh < min_size or ww < min_size:
            if drop_small:
                continue
            raise UsageError(f"component {idx} is {hh}x{ww}, smaller than {min_size}x{min_size}")
        comp = np.pad(labels == idx, 1)
        ys, xs = np.nonzero(comp)
        order = np.lexsort((xs, ys))
        start = (int(ys[order[0]]), int(xs[order[0]]))
        pts = np.array([(c - 1, r - 1) for r, c in _moore(comp, start)], dtype=np.int64)
        if signed_area(pts) < 0:
            pts = np.concatenate([pts[:1], pts[:0:-1]])
        out.append(pts)
    return out


def gaussian_kernel(s: float) -> tuple[np.ndarray, np.ndarray]:
    """Offsets and weights of a Gaussian with std ``s``, truncated at 3s, summing to 1."""
    if s <= 0:
        raise UsageError("smoothing std must be positive")
    r = max(1, int(math.ceil(3 * s)))
    k = np.arange(-r, r + 1)
    w = np.exp(-0.5 * (k / s) ** 2)
    return k, w / w.sum()


def gaussian_smooth_circular(values, s: float) -> np.ndarray:
    """Wrap-around convolution of a cyclic sequence with a truncated Gaussian."""
    v = np.asarray(values, dtype=np.float64)
    n = len(v)
    if n < 1:
        raise UsageError("cannot smooth an empty sequence")
    k, w = gaussian_kernel(s)
    idx = (np.arange(n)[:, None] - k[None, :]) % n
    return (v[idx] * w[None, :]).sum(axis=1)


def rasterize(contour, H: int, W: int) -> np.ndarray:
    """Even-odd scanline fill of a closed polygon, plus the pixels of its vertices.

    A pixel centre ``(x, y)`` is inside when an odd number of edge crossings
    on row ``y`` lie at or left of ``x``; edges are half-open in y.
    """
    pts = np.asarray(contour, dtype=np.float64)
    if pts.ndim != 2 or len(pts) < 3:
        raise UsageError("polygon needs at least 3 points")
    x0, y0 = pts[:, 0], pts[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    lo, hi = np.minimum(y0, y1), np.maximum(y0, y1)
    out = np.zeros((H, W), dtype=np.uint8)
    for y in range(H):
        sel = (lo <= y) & (y < hi)
        if not sel.any():
            continue
        xs = np.sort(x0[sel] + (y - y0[sel]) * (x1[sel] - x0[sel]) / (y1[sel] - y0[sel]))
        for a, b in zip(xs[0::2], xs[1::2]):
            c0, c1 = max(0, math.ceil(a)), min(W, math.ceil(b))
            if c1 > c0:
                out[y, c0:c1] = 1
    vx, vy = np.rint(x0).astype(int), np.rint(y0).astype(int)
    ok = (vx >= 0) & (vx < W) & (vy >= 0) & (vy < H)
    out[vy[ok], vx[ok]] = 1
    return out


@dataclass(frozen=True)
class AugmentParams:
    zeta: float = 2.0
    s: float = 5.0
    N: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.zeta < 0 or self.s <= 0 or self.N < 1:
            raise UsageError(f"invalid augmentation parameters {self}")


def default_zeta(mask) -> float:
    """max(2, 8% of the bounding-box diagonal)."""
    ys, xs = np.nonzero(as_mask(mask))
    diag = math.hypot(ys.max() - ys.min() + 1, xs.max() - xs.min() + 1)
    return max(2.0, 0.08 * diag)


def _shrink_once(M: np.ndarray, M_tr: np.ndarray, zeta: float, s: float,
                 rng: np.random.Generator) -> np.ndarray:
    H, W = M.shape
    new = np.zeros_like(M)
    for P in trace_contours(M, drop_small=True):
        n = len(P)
        dx = gaussian_smooth_circular(rng.uniform(-zeta, zeta, n), s)
        dy = gaussian_smooth_circular(rng.uniform(-zeta, zeta, n), s)
        Q = np.stack([np.rint(P[:, 0] + dx), np.rint(P[:, 1] + dy)], axis=1).astype(np.int64)
        Q[:, 0] = np.clip(Q[:, 0], 0, W - 1)
        Q[:, 1] = np.clip(Q[:, 1], 0, H - 1)
        outside = M_tr[Q[:, 1], Q[:, 0]] == 0
        if outside.any():
            d2 = ((Q[outside, None, :] - P[None, :, :]) ** 2).sum(axis=2)
            Q[outside] = P[np.argmin(d2, axis=1)]
        new |= rasterize(Q, H, W)
    return new & M_tr


def augment_mask(M_tr, params: AugmentParams) -> np.ndarray:
    """Random shrunken variant of ``M_tr`` by perturbing its contour N times.

    The result is always a subset of ``M_tr``.  If shrinking empties the mask,
    the offset range is halved (up to three times); failing that the filled
    original contour is returned.
    """
    M_tr = as_mask(M_tr)
    trace_contours(M_tr)  # validates non-empty and component sizes
    rng = np.random.default_rng(params.seed)
    zeta = params.zeta
    for _ in range(4):
        M = M_tr
        for _ in range(params.N):
            if not M.any():
                break
            M = _shrink_once(M, M_tr, zeta, params.s, rng)
        if M.any():
            return M
        zeta /= 2
    H, W = M_tr.shape
    base = np.zeros_like(M_tr)
    for P in trace_contours(M_tr):
        base |= rasterize(P, H, W)
    return base & M_tr


# ---------------------------------------------------------------------------
# benchmark mask families


def bounding_rect(m) -> np.ndarray:
    m = as_mask(m)
    ys, xs = np.nonzero(m)
    out = np.zeros_like(m)
    out[ys.min():ys.max() + 1, xs.min():xs.max() + 1] = 1
    return out


def bounding_circle(m) -> np.ndarray:
    """Disk centred on the mask centroid that reaches its farthest pixel."""
    m = as_mask(m)
    ys, xs = np.nonzero(m)
    cy, cx = ys.mean(), xs.mean()
    r = np.sqrt((ys - cy) ** 2 + (xs - cx) ** 2).max() + 0.5
    yy, xx = np.mgrid[0:m.shape[0], 0:m.shape[1]]
    return (((yy - cy) ** 2 + (xx - cx) ** 2) <= r * r).astype(np.uint8)


def brush_mask(m, seed) -> np.ndarray:
    """Union of disks along the medial axis with jittered radii, like a circle brush."""
    m = as_mask(m)
    rng = np.random.default_rng(seed)
    # medial_axis breaks ties randomly unless given a generator
    skel, dist = medial_axis(m.astype(bool), return_distance=True, rng=0)
    ys, xs = np.nonzero(skel)
    radii = (dist[ys, xs] + 0.5) * rng.uniform(1.0, 1.4, len(ys)) + rng.uniform(0.0, 1.0)
    yy, xx = np.mgrid[0:m.shape[0], 0:m.shape[1]]
    out = np.zeros(m.shape, dtype=bool)
    for y, x, r in zip(ys, xs, radii):
        out |= (yy - y) ** 2 + (xx - x) ** 2 <= r * r
    return out.astype(np.uint8)


def dilate(m, radius: int = 3) -> np.ndarray:
    m = as_mask(m)
    yy, xx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    return ndimage.binary_dilation(m, structure=(yy ** 2 + xx ** 2) <= radius * radius).astype(np.uint8)


UNSEEN_KINDS = ("rect", "circle", "brush", "dilated")


def mask_family(M_gt, seed) -> dict[str, np.ndarray]:
    """The seen mask (``M_gt`` itself) and four hand-drawn-style unseen masks."""
    m = as_mask(M_gt)
    if not m.any():
        raise UsageError("ground-truth mask is empty")
    return {"seen": m, "rect": bounding_rect(m), "circle": bounding_circle(m),
            "brush": brush_mask(m, seed), "dilated": dilate(m, 3)}
