"""Central finite-difference verification of every differentiable operation.

Each check builds a scalar probe ``sum(op(inputs) * R)`` with a fixed random
weighting R, computes the analytic gradient with the reverse pass, and
compares against central differences.  Relative error is measured on norms,
``|a - f| / max(|a|, |f|, 1)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import Tensor

FD_STEP = 1e-3
TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    rel_error: float

    @property
    def passed(self):
        return self.rel_error <= TOLERANCE


def numeric_gradient(fn, x, step=FD_STEP):
    """Central finite differences of a scalar function of one ndarray."""
    g = np.zeros_like(x)
    flat = g.reshape(-1)
    xf = x.reshape(-1)
    for i in range(xf.size):
        orig = xf[i]
        xf[i] = orig + step
        hi = fn(x)
        xf[i] = orig - step
        lo = fn(x)
        xf[i] = orig
        flat[i] = (hi - lo) / (2.0 * step)
    return g


def relative_error(analytic, numeric):
    diff = np.linalg.norm(analytic - numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1.0)
    return float(diff / scale)


def check_op(name, make, arrays, dtype=np.float64, probe_seed=1234):
    """Compare analytic and numeric gradients of an operation.

    ``make`` maps input Tensors to an output Tensor of any shape; the check
    reduces it with a fixed random weighting to a scalar (a vᵀJ probe) and
    verifies the gradient for every input array.
    """
    tensors = [Tensor(a.astype(dtype), requires_grad=True) for a in arrays]
    probe = {}
    prng = np.random.default_rng(probe_seed)

    def build(*ts):
        out = make(*ts)
        if out.data.shape == ():
            return out
        r = probe.get(out.shape)
        if r is None:
            r = prng.standard_normal(out.shape).astype(dtype)
            probe[out.shape] = r
        return engine.sum_all(engine.mul(out, Tensor(r)))

    root = build(*tensors)
    grads = engine.backward(root)
    worst = 0.0
    for k, t in enumerate(tensors):

        def scalar_fn(arr, k=k):
            probe = [Tensor(a.data if j != k else arr.copy())
                     for j, a in enumerate(tensors)]
            return build(*probe).item()

        numeric = numeric_gradient(scalar_fn, arrays[k].astype(dtype).copy())
        analytic = grads.get(t)
        if analytic is None:
            analytic = np.zeros_like(numeric)
        worst = max(worst, relative_error(analytic, numeric))
    return CheckResult(name, worst)


def default_suite(seed=0, dtype=np.float64):
    """The full primitive + loss gradient-check suite.

    Inputs are nudged away from kinks (relu zero, maxpool ties, clamp edges)
    so central differences are valid.
    """
    rng = np.random.default_rng(seed)
    results = []

    def away_from_zero(shape, margin=0.1):
        x = rng.standard_normal(shape)
        return x + margin * np.sign(x) + (x == 0) * margin

    def run(name, make, *arrays):
        results.append(check_op(name, make, arrays, dtype=dtype))

    x4 = rng.standard_normal((2, 3, 6, 6))
    k33 = rng.standard_normal((4, 3, 3, 3)) * 0.5
    run("conv2d/s1p1", lambda x, k: engine.conv2d(x, k, 1, 1), x4, k33)
    run("conv2d/s2p0", lambda x, k: engine.conv2d(x, k, 2, 0), x4, k33)
    kt = rng.standard_normal((3, 2, 2, 2)) * 0.5
    run("transpose_conv2d/s2",
        lambda x, k: engine.transpose_conv2d(x, k, 2), x4, kt)
    run("maxpool2x2", engine.maxpool2x2, away_from_zero((2, 3, 4, 4)))
    run("relu", engine.relu, away_from_zero((3, 5)))
    run("sigmoid", engine.sigmoid, rng.standard_normal((4, 4)))
    run("log", engine.log, rng.uniform(0.2, 3.0, (3, 4)))
    run("clamp", lambda x: engine.clamp(x, -0.5, 0.5),
        rng.uniform(-0.4, 0.4, (3, 4)) + 1.1 * rng.integers(0, 2, (3, 4)))
    run("add", engine.add, rng.standard_normal((2, 5)), rng.standard_normal((2, 5)))
    run("mul", engine.mul, rng.standard_normal((2, 5)), rng.standard_normal((2, 5)))
    run("add_bias", engine.add_bias,
        rng.standard_normal((2, 3, 4, 4)), rng.standard_normal(3))
    run("channel_affine", engine.channel_affine,
        rng.standard_normal((2, 3, 4, 4)), rng.standard_normal(3),
        rng.standard_normal(3))
    run("batchnorm", engine.batchnorm,
        rng.standard_normal((3, 2, 4, 4)),
        rng.uniform(0.5, 1.5, 2), rng.standard_normal(2))
    run("concat_channels", engine.concat_channels,
        rng.standard_normal((2, 2, 3, 3)), rng.standard_normal((2, 3, 3, 3)))
    run("replicate_pad", lambda x: engine.replicate_pad(x, 2),
        rng.standard_normal((2, 2, 3, 4)))
    run("sum", engine.sum_all, rng.standard_normal((4, 4)))
    run("sum/exact", lambda x: engine.sum_all(x, exact=True),
        rng.standard_normal((4, 4)))
    run("mean", engine.mean_all, rng.standard_normal((4, 4)))
    run("squared_l2", engine.squared_l2, rng.standard_normal((3, 4)))

    # loss-level checks live here too so one command verifies the whole chain
    from . import losses
    from .extractor import analytic_extractor

    cfg = losses.LossConfig()
    gt = (rng.uniform(0, 1, (1, 1, 16, 16)) > 0.7).astype(dtype)
    pred0 = rng.uniform(0.05, 0.95, (1, 1, 16, 16))
    run("loss/bce",
        lambda p: losses.bce(p, Tensor(gt), cfg), pred0)
    bank = analytic_extractor(dtype=dtype)
    run("loss/topo",
        lambda p: losses.topo_loss(p, Tensor(gt), bank, cfg), pred0)
    run("loss/combined",
        lambda p: losses.combined_loss(p, Tensor(gt), bank, cfg)[0], pred0)

    def refinement_probe(p1, p2):
        l1 = losses.combined_loss(p1, Tensor(gt), bank, cfg)[0]
        l2 = losses.combined_loss(p2, Tensor(gt), bank, cfg)[0]
        return losses.weighted_partial_sum([l1, l2])

    run("loss/refinement", refinement_probe,
        rng.uniform(0.05, 0.95, (1, 1, 16, 16)),
        rng.uniform(0.05, 0.95, (1, 1, 16, 16)))

    return results


def run_suite(seed=0, dtype=np.float64, report=print):
    results = default_suite(seed=seed, dtype=dtype)
    worst = max(results, key=lambda r: r.rel_error)
    for r in results:
        report(f"{'ok' if r.passed else 'FAIL':4s} {r.name:24s} rel_err={r.rel_error:.3e}")
    report(f"worst: {worst.name} rel_err={worst.rel_error:.3e}")
    return results
