"""Desk-scale ablation experiments: loss-term and refinement-depth trends.

Reproduces the directional behavior of the two configuration studies: with
identical seeds and configs, (a) adding the topology term (mu = 0.1, all
three descriptor levels) should beat plain pixel-wise training on the
skeleton quality score, and (b) iterating the trained refinement should
not hurt, with successive prediction changes shrinking.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .data import SynthConfig, synth
from .losses import LossConfig
from .trainer import RefinementConfig, TrainConfig, predict_refined, train
from .unet import UNetConfig

TREND_SYNTH = SynthConfig(
    canvas_size=64,
    stroke_count=(2, 3),
    stroke_width=(1.2, 2.4),
    stroke_length=(45, 90),
    gap_probability=1.0,
    gap_length=(8, 14),
    distractor_count=(8, 12),
    distractor_radius=(1.2, 2.8),
    background_amplitude=0.3,
    noise_std=0.08,
    stroke_intensity=(0.55, 0.85),
    seed=20240,
)

TREND_MODEL = UNetConfig(depth=3, base_channels=8, input_size=64)
TREND_SCHEDULE = ((1, 3), (2, 2), (3, 3))
TREND_RHO = 2.0


def trend_dataset(n_train=200, n_test=50, config=TREND_SYNTH):
    samples = synth(config, n_train + n_test)
    return samples[:n_train], samples[n_train:]


def trend_train_config(mu, seed):
    return TrainConfig(learning_rate=1e-3, batch_size=8, patch_size=64,
                       seed=seed, val_fraction=0.1, precision="single",
                       loss=LossConfig(mu=mu))


@dataclass
class TrendRun:
    mu: float
    seed: int
    quality_by_k: dict = field(default_factory=dict)
    contraction_fraction: float = 0.0
    threshold: float = 0.5
    log_lines: list = field(default_factory=list)


def mean_test_quality(probs, gts, threshold, rho=TREND_RHO):
    gt_skels = [metrics.skeletonize(g) for g in gts]
    qs = [metrics.centerline_scores(
        metrics.skeletonize(p >= threshold), g, rho)[2]
        for p, g in zip(probs, gt_skels)]
    return float(np.mean(qs))


def run_trend_training(train_samples, test_samples, mu, seed,
                       schedule=TREND_SCHEDULE, verbose=None):
    """One seeded training run plus test-set evaluation at K = 1..3."""
    result = train(train_samples, TREND_MODEL,
                   RefinementConfig(k_final=schedule[-1][0], schedule=schedule),
                   trend_train_config(mu, seed), rho=TREND_RHO,
                   verbose=verbose)
    run = TrendRun(mu=mu, seed=seed, threshold=result.best_threshold,
                   log_lines=result.log_lines)
    images = np.stack([s.image for s in test_samples])[:, None]
    gts = [s.gt for s in test_samples]
    preds = predict_refined(TREND_MODEL, result.best_params, images, 3)
    for k in (1, 2, 3):
        probs = [preds[k - 1][i, 0] for i in range(len(test_samples))]
        run.quality_by_k[k] = mean_test_quality(probs, gts, run.threshold)
    diffs = [np.linalg.norm((preds[k] - preds[k - 1])[i, 0])
             for i in range(len(test_samples)) for k in [1, 2]]
    per_image = np.array(diffs).reshape(len(test_samples), 2)
    run.contraction_fraction = float((per_image[:, 1] <= per_image[:, 0]).mean())
    return run


def mu_trend(seeds=(0, 1, 2), n_train=200, n_test=50, verbose=None):
    """Median quality with the topology term versus without, same seeds."""
    tr, te = trend_dataset(n_train, n_test)
    runs = {0.0: [], 0.1: []}
    for seed in seeds:
        for mu in (0.1, 0.0):
            run = run_trend_training(tr, te, mu, seed, verbose=verbose)
            runs[mu].append(run)
            if verbose:
                verbose(f"mu={mu} seed={seed}: quality@K3 "
                        f"{run.quality_by_k[3]:.4f} thr {run.threshold:.2f}")
    summary = {
        "median_quality_mu": float(np.median(
            [r.quality_by_k[3] for r in runs[0.1]])),
        "median_quality_bce": float(np.median(
            [r.quality_by_k[3] for r in runs[0.0]])),
        "runs": runs,
    }
    summary["gap"] = summary["median_quality_mu"] - summary["median_quality_bce"]
    return summary


def k_trend(runs_mu):
    """Refinement-depth behavior of the topology-trained checkpoints."""
    q1 = [r.quality_by_k[1] for r in runs_mu]
    q3 = [r.quality_by_k[3] for r in runs_mu]
    contraction = [r.contraction_fraction for r in runs_mu]
    return {
        "median_quality_k1": float(np.median(q1)),
        "median_quality_k3": float(np.median(q3)),
        "min_contraction_fraction": float(min(contraction)),
    }
