"""Synthetic curvilinear data, augmentation, and grayscale image I/O.

Samples pair an image in [0,1] with a strictly binary ground truth of the
same shape.  The generator draws smooth random strokes (chained quadratic
curves) as ground truth, then composes the image from a low-frequency
background, the rendered strokes, distractor blobs, and noise.  Gaps are
cut only in the image, never in the ground truth, so bridging them is the
learnable target.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .unet import ConfigError


class DataError(Exception):
    """Unreadable/ill-formed dataset contents."""


@dataclass
class Sample:
    image: np.ndarray  # (H, W) float64 in [0, 1]
    gt: np.ndarray     # (H, W) uint8 in {0, 1}
    id: str

    def validate(self):
        if self.image.shape != self.gt.shape:
            raise DataError(
                f"sample {self.id!r}: image {self.image.shape} != gt {self.gt.shape}")
        if self.image.min() < 0 or self.image.max() > 1:
            raise DataError(f"sample {self.id!r}: image values outside [0,1]")
        if not np.all((self.gt == 0) | (self.gt == 1)):
            raise DataError(f"sample {self.id!r}: ground truth not binary")
        return self


@dataclass(frozen=True)
class SynthConfig:
    canvas_size: int = 64
    stroke_count: tuple = (2, 3)          # inclusive range
    stroke_width: tuple = (1.2, 2.4)      # px
    stroke_length: tuple = (45.0, 90.0)   # arc length, px
    gap_probability: float = 0.7
    gap_length: tuple = (4.0, 9.0)        # px, cut in the image only
    distractor_count: tuple = (3, 6)
    distractor_radius: tuple = (1.2, 2.8)
    background_amplitude: float = 0.25
    noise_std: float = 0.06
    stroke_intensity: tuple = (0.6, 0.9)
    seed: int = 0

    def __post_init__(self):
        for name in ("stroke_count", "stroke_width", "stroke_length",
                     "gap_length", "distractor_count", "distractor_radius",
                     "stroke_intensity"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name}: empty range ({lo}, {hi})")
        if not 0 <= self.gap_probability <= 1:
            raise ConfigError(f"gap_probability outside [0,1]")


def _smooth_field(rng, size, cells=8):
    """Low-frequency random field in [0,1]: bilinear upsample of a coarse grid."""
    coarse = rng.uniform(0.0, 1.0, (cells + 1, cells + 1))
    ys = np.linspace(0, cells, size)
    xs = np.linspace(0, cells, size)
    y0 = np.clip(ys.astype(int), 0, cells - 1)
    x0 = np.clip(xs.astype(int), 0, cells - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    c00 = coarse[y0][:, x0]
    c01 = coarse[y0][:, x0 + 1]
    c10 = coarse[y0 + 1][:, x0]
    c11 = coarse[y0 + 1][:, x0 + 1]
    return (c00 * (1 - fy) * (1 - fx) + c01 * (1 - fy) * fx
            + c10 * fy * (1 - fx) + c11 * fy * fx)


def _quadratic_points(p0, p1, p2, step=0.25):
    """Points along a quadratic Bezier, spaced ~step in parameter arc."""
    chord = np.linalg.norm(p2 - p0) + np.linalg.norm(p1 - p0) + np.linalg.norm(p2 - p1)
    n = max(int(chord / step), 4)
    t = np.linspace(0.0, 1.0, n)[:, None]
    return (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t ** 2 * p2


def _stroke_polyline(rng, size, target_length):
    """Chained quadratic curves with C1-ish continuity, clipped to canvas."""
    margin = 4.0
    pos = rng.uniform(margin, size - margin, 2)
    heading = rng.uniform(0, 2 * np.pi)
    pts = [pos[None, :]]
    total = 0.0
    while total < target_length:
        seg_len = rng.uniform(12.0, 22.0)
        turn = rng.normal(0.0, 0.5)
        d0 = np.array([np.cos(heading), np.sin(heading)])
        d1 = np.array([np.cos(heading + turn), np.sin(heading + turn)])
        p0 = pts[-1][-1]
        p1 = p0 + d0 * seg_len * 0.5
        p2 = p0 + (d0 + d1) * 0.5 * seg_len
        seg = _quadratic_points(p0, p1, p2)
        seg_arc = np.linalg.norm(np.diff(seg, axis=0), axis=1).sum()
        pts.append(seg[1:])
        total += seg_arc
        heading += turn
    poly = np.concatenate(pts)
    return np.clip(poly, 1.0, size - 2.0)


def _arc_positions(points):
    steps = np.linalg.norm(np.diff(points, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(steps)])


def _distance_to_points(size, points):
    """Per-pixel Euclidean distance to the nearest polyline sample."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    centers = np.stack([yy.ravel(), xx.ravel()], axis=1)
    d2 = ((centers[:, None, :] - points[None, :, :]) ** 2).sum(axis=2)
    return np.sqrt(d2.min(axis=1)).reshape(size, size)


def synth_one(config, rng, sample_id):
    size = config.canvas_size
    gt = np.zeros((size, size), dtype=np.uint8)
    stroke_layer = np.zeros((size, size))
    n_strokes = int(rng.integers(config.stroke_count[0],
                                 config.stroke_count[1] + 1))
    for _ in range(n_strokes):
        length = rng.uniform(*config.stroke_length)
        width = rng.uniform(*config.stroke_width)
        intensity = rng.uniform(*config.stroke_intensity)
        poly = _stroke_polyline(rng, size, length)
        # points are in (y, x); distances drive both mask and soft rendering
        dist_full = _distance_to_points(size, poly)
        gt |= (dist_full <= width / 2.0).astype(np.uint8)

        visible = poly
        if rng.uniform() < config.gap_probability and len(poly) > 8:
            arc = _arc_positions(poly)
            glen = rng.uniform(*config.gap_length)
            start = rng.uniform(0.15, 0.85) * arc[-1]
            keep = (arc < start) | (arc > start + glen)
            if keep.sum() >= 2:
                visible = poly[keep]
        dist_vis = (_distance_to_points(size, visible)
                    if visible is not poly else dist_full)
        profile = np.clip(width / 2.0 + 0.5 - dist_vis, 0.0, 1.0)
        stroke_layer = np.maximum(stroke_layer, intensity * profile)

    image = config.background_amplitude * _smooth_field(rng, size)
    image = np.maximum(image, stroke_layer)

    n_blobs = int(rng.integers(config.distractor_count[0],
                               config.distractor_count[1] + 1))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    for _ in range(n_blobs):
        cy, cx = rng.uniform(3, size - 3, 2)
        radius = rng.uniform(*config.distractor_radius)
        intensity = rng.uniform(*config.stroke_intensity)
        d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        blob = intensity * np.clip(radius + 0.5 - d, 0.0, 1.0)
        image = np.maximum(image, blob)

    if config.noise_std > 0:
        image = image + rng.normal(0.0, config.noise_std, (size, size))
    return Sample(image=np.clip(image, 0.0, 1.0), gt=gt, id=sample_id).validate()


def synth(config, n):
    """n seeded samples; per-sample child seeds allow parallel generation."""
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    seeds = np.random.SeedSequence(config.seed).spawn(n)
    return [synth_one(config, np.random.default_rng(seeds[i]), f"s{i:04d}")
            for i in range(n)]


# ---------------------------------------------------------------------------
# augmentation

def augment(sample):
    """All 8 mirror/rotation variants (identity first); gt transformed along."""
    h, w = sample.image.shape
    if h != w:
        raise DataError(f"augment requires square images, got {h}x{w}")
    out = []
    for mirror in (False, True):
        img = np.fliplr(sample.image) if mirror else sample.image
        gt = np.fliplr(sample.gt) if mirror else sample.gt
        for rot in range(4):
            out.append(Sample(image=np.ascontiguousarray(np.rot90(img, rot)),
                              gt=np.ascontiguousarray(np.rot90(gt, rot)),
                              id=f"{sample.id}_m{int(mirror)}r{rot * 90}"))
    return out


def _smooth_nodes(nodes):
    """One binomial pass over the displacement node grid; without it the
    independent node draws distort local area enough to eat thin strokes."""
    p = np.pad(nodes, 1, mode="edge")
    k = np.array([0.25, 0.5, 0.25])
    rows = k[0] * p[:-2, :] + k[1] * p[1:-1, :] + k[2] * p[2:, :]
    return k[0] * rows[:, :-2] + k[1] * rows[:, 1:-1] + k[2] * rows[:, 2:]


def _bilinear(arr, ys, xs):
    h, w = arr.shape
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = ys - y0
    fx = xs - x0
    return (arr[y0, x0] * (1 - fy) * (1 - fx) + arr[y0, x1] * (1 - fy) * fx
            + arr[y1, x0] * fy * (1 - fx) + arr[y1, x1] * fy * fx)


def elastic_deform(sample, grid_spacing=8, displacement_std=2.0, seed=0):
    """Warp by a smooth random displacement field; gt is warped with the
    same field and re-thresholded at 0.5 so it stays binary."""
    if grid_spacing < 4:
        raise ConfigError(f"grid_spacing must be >= 4, got {grid_spacing}")
    if displacement_std < 0:
        raise ConfigError("displacement_std must be >= 0")
    h, w = sample.image.shape
    if displacement_std == 0:
        return Sample(image=sample.image.copy(), gt=sample.gt.copy(),
                      id=f"{sample.id}_e{seed}")
    rng = np.random.default_rng(seed)
    ny = h // grid_spacing + 2
    nx = w // grid_spacing + 2
    node_dy = _smooth_nodes(rng.normal(0.0, displacement_std, (ny, nx)))
    node_dx = _smooth_nodes(rng.normal(0.0, displacement_std, (ny, nx)))
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    gy = yy / grid_spacing
    gx = xx / grid_spacing
    dy = _bilinear(node_dy, gy, gx)
    dx = _bilinear(node_dx, gy, gx)
    image = _bilinear(sample.image, yy + dy, xx + dx)
    gt = (_bilinear(sample.gt.astype(np.float64), yy + dy, xx + dx)
          >= 0.5).astype(np.uint8)
    return Sample(image=np.clip(image, 0.0, 1.0), gt=gt,
                  id=f"{sample.id}_e{seed}").validate()


def patches(sample, size, stride):
    """Regular-grid crops; stride > size leaves uncovered pixels (allowed)."""
    h, w = sample.image.shape
    if size > h or size > w:
        raise DataError(f"patch size {size} exceeds sample extent {h}x{w}")
    if stride < 1:
        raise DataError(f"stride must be >= 1, got {stride}")
    out = []
    for r in range(0, h - size + 1, stride):
        for c in range(0, w - size + 1, stride):
            out.append(Sample(image=sample.image[r:r + size, c:c + size].copy(),
                              gt=sample.gt[r:r + size, c:c + size].copy(),
                              id=f"{sample.id}_y{r}x{c}"))
    return out


# ---------------------------------------------------------------------------
# 8-bit grayscale file I/O and the dataset directory layout

def save_image(path, values):
    """Write a [0,1] map as 8-bit grayscale (PNG or PGM by extension)."""
    arr = np.asarray(values, dtype=np.float64)
    data = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path)


def save_gt(path, gt):
    save_image(path, np.asarray(gt, dtype=np.float64))


def load_image(path):
    try:
        img = Image.open(path)
        img.load()
    except FileNotFoundError:
        raise DataError(f"image file not found: {path}")
    except Exception as exc:
        raise DataError(f"unreadable image {path}: {exc}")
    if img.mode != "L":
        raise DataError(f"{path}: expected 8-bit grayscale, got mode {img.mode!r}")
    return np.asarray(img, dtype=np.float64) / 255.0


def load_gt(path):
    return (load_image(path) >= 0.5).astype(np.uint8)


def write_dataset(root, samples, fmt="png"):
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    os.makedirs(os.path.join(root, "labels"), exist_ok=True)
    for s in samples:
        save_image(os.path.join(root, "images", f"{s.id}.{fmt}"), s.image)
        save_gt(os.path.join(root, "labels", f"{s.id}.{fmt}"), s.gt)
    with open(os.path.join(root, "manifest.txt"), "w") as fh:
        fh.write("".join(f"{s.id}\n" for s in samples))


def _resolve(root, sub, sid):
    for ext in ("png", "pgm"):
        path = os.path.join(root, sub, f"{sid}.{ext}")
        if os.path.exists(path):
            return path
    raise DataError(f"no image for id {sid!r} under {os.path.join(root, sub)}")


def read_manifest(root):
    path = os.path.join(root, "manifest.txt")
    if not os.path.exists(path):
        raise DataError(f"missing manifest: {path}")
    with open(path) as fh:
        return [line.strip() for line in fh if line.strip()]


def read_dataset(root, with_labels=True):
    samples = []
    for sid in read_manifest(root):
        image = load_image(_resolve(root, "images", sid))
        if with_labels:
            gt = load_gt(_resolve(root, "labels", sid))
            if gt.shape != image.shape:
                raise DataError(
                    f"id {sid!r}: image {image.shape} != label {gt.shape}")
        else:
            gt = np.zeros_like(image, dtype=np.uint8)
        samples.append(Sample(image=image, gt=gt, id=sid).validate())
    return samples
