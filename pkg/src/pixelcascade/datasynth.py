"""Synthetic dataset generation with analytically-derived ground truth.

Geometry is rasterized with integer-only predicates (rotations come from
integer direction vectors), so masks are bit-stable across platforms; the
only floating randomness is background noise drawn from a counter-based
generator and interpolated with plain elementwise arithmetic.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .evaluation import thin_mask

SHAPE_KINDS = ("rectangle", "ellipse", "capsule")
MARGIN = 2
MIN_CONTRAST = 0.25
MAX_NOISE = 0.08
AREA_BOUNDS = (0.04, 0.60)

# integer direction vectors (dy, dx) giving 8 distinct orientations
_DIRECTIONS = ((0, 1), (1, 2), (1, 1), (2, 1), (1, 0), (2, -1), (1, -1), (1, -2))


@dataclass(frozen=True)
class ShapeParams:
    kind: str
    center: tuple  # (row, col)
    size: tuple    # (half_length, half_width) semi-extents in pixels
    direction: tuple  # integer (dy, dx) long-axis vector
    fg: float
    bg: float
    noise_amp: float

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise ValueError(f"unknown shape kind {self.kind!r}")
        if self.direction == (0, 0):
            raise ValueError("direction vector must be nonzero")


@dataclass
class SyntheticSample:
    image: np.ndarray        # (3, H, W) float in [0, 1]
    saliency_gt: np.ndarray  # (H, W) in {0, 1}
    edge_gt: np.ndarray
    skeleton_gt: np.ndarray
    seed: int
    shapes: tuple = ()


# Rasterization ------------------------------------------------------------------


def rasterize(shape: ShapeParams, size: int) -> np.ndarray:
    """Integer-exact membership test of every pixel center."""
    rows, cols = np.mgrid[0:size, 0:size].astype(np.int64)
    cy, cx = shape.center
    dy, dx = shape.direction
    a, b = shape.size
    pr = rows - cy
    pc = cols - cx
    ln = dy * dy + dx * dx
    if shape.kind == "rectangle":
        u = pr * dy + pc * dx
        v = pr * dx - pc * dy
        return (u * u <= a * a * ln) & (v * v <= b * b * ln)
    if shape.kind == "ellipse":
        u = pr * dy + pc * dx
        v = pr * dx - pc * dy
        return (u * u) * (b * b) + (v * v) * (a * a) <= a * a * b * b * ln
    # capsule: segment between integer endpoints, inflated by half-width b
    k = max(1, round(a / float(np.sqrt(ln))))
    e1 = (cy - k * dy, cx - k * dx)
    e2 = (cy + k * dy, cx + k * dx)
    ar = rows - e1[0]
    ac = cols - e1[1]
    br = e2[0] - e1[0]
    bc = e2[1] - e1[1]
    t = ar * br + ac * bc
    tt = br * br + bc * bc
    d1 = ar * ar + ac * ac
    d2 = (rows - e2[0]) ** 2 + (cols - e2[1]) ** 2
    cross = ar * bc - ac * br
    mid = cross * cross <= b * b * tt
    return np.where(t <= 0, d1 <= b * b, np.where(t >= tt, d2 <= b * b, mid))


def _fits(mask: np.ndarray) -> bool:
    if not mask.any():
        return False
    border = np.zeros_like(mask)
    border[:MARGIN] = border[-MARGIN:] = True
    border[:, :MARGIN] = border[:, -MARGIN:] = True
    return not (mask & border).any()


def _dilate(mask: np.ndarray, steps: int = 2) -> np.ndarray:
    out = mask.copy()
    for _ in range(steps):
        grown = out.copy()
        grown[1:] |= out[:-1]
        grown[:-1] |= out[1:]
        grown[:, 1:] |= out[:, :-1]
        grown[:, :-1] |= out[:, 1:]
        out = grown
    return out


# Ground-truth derivation ---------------------------------------------------------


def derive_edge_gt(mask) -> np.ndarray:
    """Mask pixels 4-adjacent to background; the frame exterior counts as
    background, so a shape touching the border still has an edge there."""
    m = np.asarray(mask) > 0.5
    padded = np.pad(m, 1)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1]
                & padded[1:-1, :-2] & padded[1:-1, 2:])
    return (m & ~interior).astype(np.float64)


def edt_ridge(mask) -> np.ndarray:
    """Ridge of the exact Euclidean distance transform (pre-thinning).

    A pixel is kept when its distance is >= all 8 neighbours and at least
    two of them are strictly smaller.
    """
    m = np.asarray(mask) > 0.5
    d = ndimage.distance_transform_edt(m)
    padded = np.pad(d, 1)
    ge_all = np.ones(m.shape, dtype=bool)
    strictly_smaller = np.zeros(m.shape, dtype=int)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            nb = padded[1 + dy:1 + dy + m.shape[0], 1 + dx:1 + dx + m.shape[1]]
            ge_all &= d >= nb
            strictly_smaller += nb < d
    return (m & ge_all & (strictly_smaller >= 2)).astype(np.float64)


def derive_skeleton_gt(mask) -> np.ndarray:
    """Distance-transform ridge thinned to width 1, never empty on a
    nonempty mask (the strongest ridge pixel is restored if thinning eats
    everything, e.g. an isolated 2x2 summit block)."""
    m = np.asarray(mask) > 0.5
    if not m.any():
        return np.zeros(m.shape, dtype=np.float64)
    d = ndimage.distance_transform_edt(m)
    ridge = edt_ridge(m) > 0
    thin = thin_mask(ridge, d)
    if not thin.any():
        flat = np.argmax(np.where(ridge, d, -1.0))
        thin = np.zeros(m.shape, dtype=bool)
        thin[np.unravel_index(flat, m.shape)] = True
    return thin.astype(np.float64)


# Sample generation ----------------------------------------------------------------


def _bilinear_up(grid: np.ndarray, h: int, w: int) -> np.ndarray:
    gh, gw = grid.shape
    ys = np.linspace(0.0, gh - 1.0, h)
    xs = np.linspace(0.0, gw - 1.0, w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, gh - 1)
    x1 = np.minimum(x0 + 1, gw - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    g00 = grid[np.ix_(y0, x0)]
    g01 = grid[np.ix_(y0, x1)]
    g10 = grid[np.ix_(y1, x0)]
    g11 = grid[np.ix_(y1, x1)]
    return (g00 * (1 - fy) * (1 - fx) + g01 * (1 - fy) * fx
            + g10 * fy * (1 - fx) + g11 * fy * fx)


def _propose_shape(rng, size, fg, bg, noise_amp) -> ShapeParams:
    kind = SHAPE_KINDS[rng.integers(0, len(SHAPE_KINDS))]
    lo = max(3, size // 10)
    hi = max(lo + 1, size // 5)
    a = int(rng.integers(lo, hi + 1))
    b = int(rng.integers(max(2, lo // 2), a + 1))
    direction = _DIRECTIONS[rng.integers(0, len(_DIRECTIONS))]
    ext = a + b + 1
    lo_c = MARGIN + ext
    hi_c = size - 1 - MARGIN - ext
    if hi_c < lo_c:
        lo_c = hi_c = size // 2
    cy = int(rng.integers(lo_c, hi_c + 1))
    cx = int(rng.integers(lo_c, hi_c + 1))
    return ShapeParams(kind, (cy, cx), (a, b), direction, fg, bg, noise_amp)


def _sample_shapes(rng, size, max_attempts):
    lo_area, hi_area = AREA_BOUNDS
    for _ in range(max_attempts):
        n_shapes = int(rng.integers(1, 4))
        bg = float(rng.uniform(0.25, 0.75))
        delta = float(rng.uniform(MIN_CONTRAST, 0.45))
        fg = bg + delta if bg < 0.5 else bg - delta
        noise_amp = float(rng.uniform(0.02, MAX_NOISE))
        shapes = []
        union = np.zeros((size, size), dtype=bool)
        ok = True
        for _ in range(n_shapes):
            shape = _propose_shape(rng, size, fg, bg, noise_amp)
            mask = rasterize(shape, size)
            if not _fits(mask) or (_dilate(mask) & union).any():
                ok = False
                break
            shapes.append((shape, mask))
            union |= mask
        if not ok:
            continue
        frac = union.sum() / union.size
        if lo_area <= frac <= hi_area:
            return shapes, union, bg, fg, noise_amp
    raise RuntimeError(
        f"could not place shapes within {max_attempts} attempts "
        f"(frame size {size})")


def generate(seed: int, size: int = 64, count: int = 1,
             max_attempts: int = 200) -> list[SyntheticSample]:
    """Deterministic samples: 1-3 non-overlapping shapes on textured ground."""
    if size % 16:
        raise ValueError(f"size {size} must be divisible by 16")
    if count < 1:
        raise ValueError("count must be at least 1")
    samples = []
    for i in range(count):
        rng = np.random.Generator(np.random.Philox(
            np.random.SeedSequence(entropy=seed, spawn_key=(i,))))
        shapes, union, bg, fg, noise_amp = _sample_shapes(rng, size, max_attempts)
        lattice = rng.uniform(-1.0, 1.0, size=(5, 5)) * noise_amp
        gray = np.clip(bg + _bilinear_up(lattice, size, size), 0.0, 1.0)
        gray[union] = fg
        image = np.repeat(gray[None], 3, axis=0)
        mask = union.astype(np.float64)
        samples.append(SyntheticSample(
            image=image,
            saliency_gt=mask,
            edge_gt=derive_edge_gt(mask),
            skeleton_gt=derive_skeleton_gt(mask),
            seed=seed,
            shapes=tuple(s for s, _ in shapes),
        ))
    return samples


# Image file I/O --------------------------------------------------------------------


def save_image(path, array):
    """8-bit PNG; values rounded half-up from [0,1]."""
    a = np.asarray(array, dtype=np.float64)
    if a.ndim == 3 and a.shape[0] in (1, 3):
        a = np.moveaxis(a, 0, -1)
    if a.ndim == 3 and a.shape[-1] == 1:
        a = a[..., 0]
    q = np.floor(np.clip(a, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    mode = "L" if q.ndim == 2 else "RGB"
    Image.fromarray(q, mode=mode).save(path, format="PNG")


def load_image(path) -> np.ndarray:
    """Float [0,1] array: (H,W) for grayscale files, (3,H,W) for color."""
    try:
        with Image.open(path) as img:
            img.load()
            if img.mode not in ("L", "RGB"):
                img = img.convert("RGB")
            a = np.asarray(img, dtype=np.float64) / 255.0
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ValueError(f"cannot read image {path}: {exc}") from exc
    if a.ndim == 3:
        a = np.moveaxis(a, -1, 0)
    return a


# Dataset directory layout -----------------------------------------------------------

GT_DIRS = {"saliency": "saliency", "edge": "edge", "skeleton": "skeleton"}


def write_dataset(samples, root, val_fraction: float = 0.0):
    """Write images/, per-task GT dirs, manifest.txt, and train/val splits."""
    for sub in ("images", *GT_DIRS.values()):
        os.makedirs(os.path.join(root, sub), exist_ok=True)
    ids = []
    for i, s in enumerate(samples):
        sid = f"{i:04d}"
        ids.append(sid)
        save_image(os.path.join(root, "images", f"{sid}.png"), s.image)
        save_image(os.path.join(root, "saliency", f"{sid}.png"), s.saliency_gt)
        save_image(os.path.join(root, "edge", f"{sid}.png"), s.edge_gt)
        save_image(os.path.join(root, "skeleton", f"{sid}.png"), s.skeleton_gt)
    with open(os.path.join(root, "manifest.txt"), "w") as fh:
        fh.write("".join(f"{sid}\n" for sid in ids))
    n_val = int(round(len(ids) * val_fraction))
    train_ids = ids[:len(ids) - n_val]
    val_ids = ids[len(ids) - n_val:]
    with open(os.path.join(root, "train.txt"), "w") as fh:
        fh.write("".join(f"{sid}\n" for sid in train_ids))
    with open(os.path.join(root, "val.txt"), "w") as fh:
        fh.write("".join(f"{sid}\n" for sid in val_ids))
    return ids


def _read_ids(root, split):
    name = "manifest.txt" if split is None else f"{split}.txt"
    path = os.path.join(root, name)
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing dataset index {path}")
    with open(path) as fh:
        return [line.strip() for line in fh if line.strip()]


def load_dataset(root, task, split=None):
    """(image (3,H,W), gt (1,H,W)) pairs for one task from the layout."""
    if task not in GT_DIRS:
        raise ValueError(f"unknown task {task!r}")
    pairs = []
    for sid in _read_ids(root, split):
        image = load_image(os.path.join(root, "images", f"{sid}.png"))
        if image.ndim == 2:
            image = np.repeat(image[None], 3, axis=0)
        gt = load_image(os.path.join(root, GT_DIRS[task], f"{sid}.png"))
        if gt.ndim == 3:
            gt = gt[0]
        pairs.append((image, (gt >= 0.5).astype(np.float64)[None]))
    return pairs
