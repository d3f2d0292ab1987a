"""Shared construction helpers for unit and acceptance tests."""

import numpy as np

from topodelin.data import SynthConfig, synth


def clean_stroke_gt(seed, size=64):
    """Binary curvilinear map from the generator, no image-side nuisances."""
    cfg = SynthConfig(canvas_size=size, seed=seed, noise_std=0.0,
                      distractor_count=(0, 0), gap_probability=0.0)
    return synth(cfg, 1)[0].gt.astype(np.float64)


def equal_flip_pair(seed, n_flips=240, size=64, blob_shape=(16, 15)):
    """Two perturbations of one stroke map with the same number of flipped
    pixels: isolated scattered flips versus a single background blob (one
    new connected component).  Returns (gt, scattered, blob) as (1,1,H,W).
    """
    gt2d = clean_stroke_gt(seed, size)
    rng = np.random.default_rng(seed + 104729)
    gt = gt2d[None, None]

    flat = gt.copy().ravel()
    idx = rng.choice(flat.size, size=n_flips, replace=False)
    flat[idx] = 1.0 - flat[idx]
    scattered = flat.reshape(gt.shape)

    bh, bw = blob_shape
    assert bh * bw == n_flips
    coords = [(r, c) for r in range(size - bh + 1) for c in range(size - bw + 1)]
    rng.shuffle(coords)
    best, best_overlap = coords[0], bh * bw + 1
    for r, c in coords:
        overlap = int(gt2d[r:r + bh, c:c + bw].sum())
        if overlap == 0:
            best = (r, c)
            break
        if overlap < best_overlap:
            best, best_overlap = (r, c), overlap
    r, c = best
    blob = gt.copy()
    blob[0, 0, r:r + bh, c:c + bw] = 1.0 - blob[0, 0, r:r + bh, c:c + bw]
    return gt, scattered, blob
