"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The desk-scale trend criteria share one set of six seeded training runs
through a session fixture; everything else is seconds-fast.  Run with
``pytest tests/test_acceptance.py -s`` to watch the lines appear.
"""

import os
import time

import numpy as np
import pytest
from conftest import equal_flip_pair

from topodelin import losses, metrics
from topodelin.cli import main
from topodelin.engine import Tensor
from topodelin.extractor import analytic_extractor
from topodelin.weights_io import (BadMagicError, TruncatedFileError,
                                  dump_weights, parse_weights)


def report(name, ok, detail=""):
    print(f"\nACCEPTANCE {name}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, f"{name} {detail}"


# ---------------------------------------------------------------------------

def test_gradient_integrity():
    from topodelin.gradcheck import run_suite
    t0 = time.monotonic()
    results = run_suite(seed=0, report=lambda *_: None)
    elapsed = time.monotonic() - t0
    worst = max(r.rel_error for r in results)
    ok = all(r.passed for r in results) and elapsed < 120
    report("gradient-integrity", ok,
           f"(worst rel err {worst:.2e}, {elapsed:.1f}s)")


def test_fig2_ordering_property():
    bank = analytic_extractor()
    cfg = losses.LossConfig()
    margins = []
    for seed in range(20):
        gt, scattered, blob = equal_flip_pair(seed=seed)
        bce_s = losses.bce(Tensor(scattered), Tensor(gt), cfg).item()
        bce_b = losses.bce(Tensor(blob), Tensor(gt), cfg).item()
        assert bce_s == bce_b, f"seed {seed}: BCE differs"
        t_s = losses.topo_loss(Tensor(scattered), Tensor(gt), bank, cfg).item()
        t_b = losses.topo_loss(Tensor(blob), Tensor(gt), bank, cfg).item()
        assert t_s > t_b, f"seed {seed}: scattered not larger"
        margins.append(t_s / t_b)
    report("fig2-ordering", True,
           f"(20 seeds, topo ratio min {min(margins):.2f})")


def test_metric_identity_suite():
    gt2d = equal_flip_pair(seed=33)[0][0, 0].astype(np.uint8)
    rep = metrics.evaluate_pair("identity", gt2d.astype(float), gt2d,
                                rho=2.0, threshold=0.5)
    ok = (rep.correctness == rep.completeness == rep.quality == 1.0
          and rep.pr_breakeven == 1.0 and rep.f1 == 1.0
          and rep.paths.fractions == (1.0, 0.0, 0.0)
          and rep.rand_fscore == 1.0)
    report("metric-identity", ok, f"({rep.row()})")


def test_metric_oracle_equivalence():
    import test_metrics as tm
    rng = np.random.default_rng(7)
    checked = 0
    for trial in range(12):
        pred = (rng.uniform(0, 1, (16, 16)) > 0.82).astype(np.uint8)
        gt = (rng.uniform(0, 1, (16, 16)) > 0.82).astype(np.uint8)
        ps, gs = metrics.skeletonize(pred), metrics.skeletonize(gt)
        for rho in (0.0, 1.0, 2.0):
            got = metrics.centerline_scores(ps, gs, rho)
            want = tm.oracle_centerline(ps.pixels.tolist(),
                                        gs.pixels.tolist(), rho)
            assert got == want
        if 2 <= ps.n_pixels <= 14:
            for i in range(ps.n_pixels):
                for j in range(i + 1, ps.n_pixels):
                    got = metrics.geodesic_length(ps, i, j)
                    want = tm.oracle_geodesic_enumerate(ps.pixels.tolist(), i, j)
                    assert got == pytest.approx(want, abs=1e-12) or \
                        (np.isinf(got) and np.isinf(want))
        prob = np.round(rng.uniform(0, 1, (16, 16)), 3)
        if gt.any():
            be, f1 = tm.oracle_threshold_sweep(prob, gt)
            assert metrics.pr_breakeven(prob, gt) == pytest.approx(be, abs=1e-12)
            assert metrics.f1_best(prob, gt) == pytest.approx(f1, abs=1e-12)
        cells = metrics.connected_component_map(rng.uniform(0, 1, (10, 10)) > 0.4, 4)
        if (cells > 0).any():
            p2 = np.round(rng.uniform(0, 1, (10, 10)), 2)
            got = metrics.rand_fscore_foreground(p2, cells, 0.5)
            sel = (cells > 0) & (metrics.connected_component_map(p2 < 0.5, 4) > 0)
            want = tm.oracle_rand_fscore(p2, cells, 0.5) if sel.any() else 0.0
            assert got == pytest.approx(want, rel=1e-12)
        checked += 1
    report("metric-oracle-equivalence", True, f"({checked} random instances)")


# ---------------------------------------------------------------------------
# desk-scale trend criteria (six seeded training runs, shared)

@pytest.fixture(scope="session")
def trend_runs():
    from topodelin.experiments import mu_trend
    cpu0 = time.process_time()
    summary = mu_trend(seeds=(0, 1, 2))
    cpu_minutes = (time.process_time() - cpu0) / 60.0
    return summary, cpu_minutes


def test_table1_left_trend_mu(trend_runs):
    summary, cpu_minutes = trend_runs
    ok = summary["gap"] >= 0.02 and cpu_minutes <= 30.0
    report("table1-left-mu-trend", ok,
           f"(median {summary['median_quality_mu']:.4f} vs "
           f"{summary['median_quality_bce']:.4f}, gap {summary['gap']:+.4f}, "
           f"{cpu_minutes:.1f} CPU-min)")


def test_table1_right_trend_k(trend_runs):
    from topodelin.experiments import k_trend
    summary, _ = trend_runs
    ks = k_trend(summary["runs"][0.1])
    ok = (ks["median_quality_k3"] >= ks["median_quality_k1"]
          and ks["min_contraction_fraction"] >= 0.80)
    report("table1-right-k-trend", ok,
           f"(K1 {ks['median_quality_k1']:.4f} -> K3 "
           f"{ks['median_quality_k3']:.4f}, contraction "
           f"{ks['min_contraction_fraction']:.2f})")


# ---------------------------------------------------------------------------

ACCEPT_CFG = """
synth.canvas_size = 16
synth.stroke_count = 1,2
synth.stroke_length = 10,18
synth.seed = 12
unet.depth = 2
unet.base_channels = 4
unet.input_size = 16
train.batch_size = 3
train.epochs = 1
train.patch_size = 16
train.val_fraction = 0.34
train.learning_rate = 0.001
loss.mu = 0.1
refine.k = 2
"""


def _tree_bytes(root):
    out = {}
    for base, _, files in os.walk(root):
        for f in files:
            with open(os.path.join(base, f), "rb") as fh:
                out[os.path.relpath(os.path.join(base, f), root)] = fh.read()
    return out


def test_determinism_end_to_end(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(ACCEPT_CFG)
    trees = {}
    for rep in ("one", "two"):
        base = tmp_path / rep
        data = base / "data"
        run = base / "run"
        pred = base / "pred"
        rpt = base / "report.tsv"
        assert main(["synth", "--config", str(cfg), "--out", str(data),
                     "--n", "6"]) == 0
        assert main(["train", "--config", str(cfg), "--data", str(data),
                     "--out", str(run)]) == 0
        assert main(["predict", "--checkpoint", str(run / "best.tdlw"),
                     "--data", str(data), "--K", "2", "--out", str(pred)]) == 0
        assert main(["eval", "--pred", str(pred), "--gt", str(data),
                     "--threshold", "0.5", "--out", str(rpt)]) == 0
        trees[rep] = _tree_bytes(base)
    ok = trees["one"] == trees["two"]
    report("determinism", ok, f"({len(trees['one'])} files byte-compared)")


def test_weight_format_round_trip():
    rng = np.random.default_rng(0)
    tensors = {f"t{i}": rng.standard_normal((i + 1, 3)).astype(np.float32)
               for i in range(4)}
    blob = dump_weights(tensors)
    back = parse_weights(blob)
    bit_exact = all(np.array_equal(back[k], tensors[k]) for k in tensors) \
        and dump_weights(back) == blob
    corrupted = bytearray(blob)
    corrupted[0] = 0
    try:
        parse_weights(bytes(corrupted))
        magic_ok = False
    except BadMagicError:
        magic_ok = True
    except Exception:
        magic_ok = False
    try:
        parse_weights(blob[:-2])
        trunc_ok = False
    except TruncatedFileError:
        trunc_ok = True
    except Exception:
        trunc_ok = False
    report("weight-format-round-trip", bit_exact and magic_ok and trunc_ok,
           "(bit-exact, distinct magic/truncation errors)")
