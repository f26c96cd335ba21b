"""Release acceptance checks, one printed PASS/FAIL line per criterion.

Criteria 10 and 11 train for hours and are marked ``slow``; run them with
``pytest -m slow tests/test_acceptance.py``. Set ``BELIEFRL_RUNS`` to a
directory to keep their training runs (reruns skip finished cells).
"""
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from beliefrl import verify
from beliefrl.cli import cell_name, grid_cells, main
from beliefrl.metrics import final_return, read_metrics

GRIDS = Path(__file__).resolve().parent.parent / "grids"


@pytest.fixture
def report(capsys):
    def emit(criterion, passed, detail):
        with capsys.disabled():
            print(f"\ncriterion {criterion}: [{'PASS' if passed else 'FAIL'}] {detail}")
        return passed
    return emit


def timed(fn, *args, **kwargs):
    t0 = time.process_time()
    res = fn(*args, **kwargs)
    return res, time.process_time() - t0


def test_c1_kalman_bound(report):
    res, secs = timed(verify.kalman_bound, seeds=50, Ks=(1, 10, 100, 1000), T=25, rel_tol=0.02)
    ok = res.passed and secs < 120
    assert report(1, ok, f"{res.detail} ({secs:.1f}s)"), res.detail


def test_c2_monotone_tightening(report):
    res, secs = timed(verify.monotone_tightening, seeds=50, Ks=(1, 4, 100))
    ok = res.passed and secs < 120
    assert report(2, ok, f"{res.detail} ({secs:.1f}s)"), res.detail


def test_c3_discrete_belief(report):
    res = verify.hmm_belief_tv(seeds=10, K=10_000, T=20, tol=0.05)
    assert report(3, res.passed, res.detail), res.detail


def test_c4_elbo_additivity(report):
    res = verify.elbo_additivity(T=20, n_s=5, tol=1e-9)
    assert report(4, res.passed, res.detail), res.detail


def test_c5_iwae_smc_k1(report):
    res = verify.iwae_smc_k1(models=20, tol=1e-12)
    assert report(5, res.passed, res.detail), res.detail


def test_c6_gradient_suite(report):
    res, secs = timed(verify.gradient_suite, seeds=20, tol=1e-4)
    ok = res.passed and secs < 60
    assert report(6, ok, f"{res.detail} ({secs:.1f}s)"), res.detail


def test_c7_resampling(report):
    res = verify.resampling_chi_square(vectors=10, draws=100_000, alpha=0.01, min_pass=9)
    assert report(7, res.passed, res.detail), res.detail


def test_c8_targets(report):
    res = verify.targets_oracle(instances=1000)
    assert report(8, res.passed, res.detail), res.detail


def test_c9_determinism(report, tmp_path):
    outs = []
    for run in ("a", "b"):
        csv_path = tmp_path / f"{run}.csv"
        cmd = [sys.executable, "-m", "beliefrl", "train", "--frames", "50000", "--metrics", str(csv_path),
               "--checkpoint", str(tmp_path / f"{run}.bin"), "--log-every", "1000"]
        subprocess.run(cmd, check=True, env={**os.environ, "BELIEFRL_SEED": "0"})
        outs.append(csv_path.read_bytes())
    rows = outs[0].count(b"\n") - 1
    ok = outs[0] == outs[1] and rows == 50000 // 80
    assert report(9, ok, f"two 50k-frame runs, {rows} rows each, byte-identical: {outs[0] == outs[1]}")


# -- slow: training comparisons -----------------------------------------------------------


def _runs_dir(tmp_path, name):
    root = Path(os.environ.get("BELIEFRL_RUNS", tmp_path))
    return root / name


def _run_grid(out, text, jobs=None):
    out.mkdir(parents=True, exist_ok=True)
    grid = out / "grid.ini"
    grid.write_text(text)
    jobs = jobs or os.cpu_count() or 1
    assert main(["ablate", "--grid", str(grid), "--out", str(out), "--jobs", str(jobs), "--skip-existing"]) == 0
    from beliefrl.cli import read_grid

    _, _, axes = read_grid(str(grid))
    return {cell_name(c): final_return(read_metrics(str(out / f"{cell_name(c)}.csv"))) for c in grid_cells(axes)}


@pytest.mark.slow
def test_c10_dvrl_beats_rnn(report, tmp_path):
    finals = _run_grid(_runs_dir(tmp_path, "c10"), (GRIDS / "headline.ini").read_text())
    wins = sum(finals[f"kind=dvrl__seed={s}"] > finals[f"kind=rnn__seed={s}"] for s in range(5))
    detail = ", ".join(f"{k}={v:.2f}" for k, v in sorted(finals.items()))
    assert report(10, wins >= 4, f"DVRL ahead in {wins}/5 seeds ({detail})")


@pytest.mark.slow
def test_c11_ablation_directions(report, tmp_path):
    root = _runs_dir(tmp_path, "c11")
    particles = _run_grid(root / "particles", "[base]\nencoder.kind = dvrl\ntrain.total_frames = 200000\n\n"
                                              "[grid]\nencoder.K = 1, 10\ntrain.seed = 0, 1, 2\n")
    window = _run_grid(root / "window", "[base]\ntrain.total_frames = 200000\n\n"
                                        "[grid]\nencoder.kind = rnn, dvrl\ntrain.n_g = 5, 25\ntrain.seed = 0, 1, 2\n")

    def mean(d, fmt, **kw):
        return float(np.mean([d[fmt.format(seed=s, **kw)] for s in range(3)]))

    k10, k1 = mean(particles, "K=10__seed={seed}"), mean(particles, "K=1__seed={seed}")
    drop = {kind: mean(window, "kind={kind}__n_g=25__seed={seed}", kind=kind)
            - mean(window, "kind={kind}__n_g=5__seed={seed}", kind=kind) for kind in ("rnn", "dvrl")}
    ok_k = k10 >= k1
    ok_ng = drop["rnn"] - drop["dvrl"] > 0
    detail = (f"K=10 {k10:.2f} vs K=1 {k1:.2f} ({'ok' if ok_k else 'wrong order'}); "
              f"n_g 25->5 drop rnn {drop['rnn']:.2f} vs dvrl {drop['dvrl']:.2f} ({'ok' if ok_ng else 'wrong order'})")
    assert report(11, ok_k and ok_ng, detail)
