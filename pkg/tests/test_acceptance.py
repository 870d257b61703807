"""End-to-end acceptance checks, one PASS/FAIL line per criterion.

The desk ``repro`` run (seed 7) is executed twice in a session fixture and
shared by the iteration-trend, determinism, dataset-count and accumulation
criteria.
"""

import itertools
import json
import time

import numpy as np
import pytest
from _gradcheck import gradient_check
from test_projection import water_slab
from test_similarity import brute_pi

from mvreg import cli
from mvreg.cnn import Architecture, BatchNorm2D, CnnModel, Conv2D, Dense, PositionwiseDense, TrainConfig, train
from mvreg.dataset import PROFILES, load_dataset, make_volumes, shift_grid
from mvreg.evaluation import read_report_csv
from mvreg.image import Image2D, center_crop, shift_image
from mvreg.mv_sim import MvSimConfig
from mvreg.optimizers import OptimizerConfig, maximize
from mvreg.projection import Displacement2D, ProjectionGeometry, render_drr
from mvreg.registration import RegistrationCase, imaging_chain, register_classical
from mvreg.similarity import SimilarityConfig, cross_correlation, mutual_information, pattern_intensity, similarity

pytestmark = pytest.mark.slow

DESK = PROFILES["desk"]


@pytest.fixture(scope="session")
def repro_runs(tmp_path_factory):
    """Two independent ``repro --profile desk --seed 7`` runs."""
    outs = []
    for k in range(2):
        out = tmp_path_factory.mktemp(f"repro{k}")
        t0 = time.perf_counter()
        code = cli.main(["repro", "--profile", "desk", "--seed", "7", "--out-dir", str(out)])
        assert code == 0
        outs.append((out, time.perf_counter() - t0))
    return outs


def test_criterion_01_drr_water_slab(acceptance_log):
    g = ProjectionGeometry(detector_dims=(5, 5), detector_spacing=(1.0, 1.0))
    slab = water_slab(100.0)
    render_drr(slab, g)  # compile the sweep kernel outside the timed call
    t0 = time.perf_counter()
    value = float(render_drr(slab, g, mu_water=0.02).data[2, 2])
    dt = time.perf_counter() - t0
    ok = abs(value - 2.0) <= 0.02 and dt < 1.0
    acceptance_log(1, ok, f"line integral {value:.5f} (target 2.0 +/- 1%), {dt:.3f} s")
    assert ok


def test_criterion_02_optimizers(acceptance_log):
    def quadratic(p):
        return -((p[0] - 3.0) ** 2 + (p[1] + 4.0) ** 2)

    def rosenbrock(p):
        return -((1.0 - p[0]) ** 2) - 100.0 * (p[1] - p[0] ** 2) ** 2

    t0 = time.perf_counter()
    problems = [(quadratic, (0.0, 0.0), (3.0, -4.0)), (rosenbrock, (-1.2, 1.0), (1.0, 1.0))]
    errs, runs = [], []
    for kind in ("powell", "simplex"):
        for fn, start, opt in problems:
            res = maximize(fn, start, OptimizerConfig(kind=kind, tolerance=1e-4, max_evals=500))
            errs.append(float(np.max(np.abs(res.argmax.as_array() - np.array(opt)))))
            runs.append((f"{kind}/{fn.__name__}", res.evals, res.converged))
    dt = time.perf_counter() - t0
    ok = max(errs) <= 1e-2 and max(r[1] for r in runs) <= 500 and dt < 1.0
    summary = ", ".join(f"{name} {n} evals{'' if conv else ' (budget stop)'}" for name, n, conv in runs)
    acceptance_log(2, ok, f"max |error| {max(errs):.2e}; {summary}; {dt:.3f} s")
    assert ok


def test_criterion_03_similarity_identities(acceptance_log):
    vol = make_volumes((2,))[0]
    geom = DESK["geometry"]
    roi = center_crop(render_drr(vol, geom), geom.roi_pixels(100.0))
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    a = Image2D(rng.normal(size=(40, 40)), (1.0, 1.0))
    grid3 = np.arange(9, dtype=float).reshape(3, 3)
    checks = {
        "cc_self": cross_correlation(a, a) == 1.0,
        "mi_const": mutual_information(a, Image2D(np.full((40, 40), 3.0), (1.0, 1.0))) == 0.0,
        "pi_3x3": pattern_intensity(grid3, grid3, SimilarityConfig(pi_radius_px=1)) == brute_pi(grid3, grid3, 10.0, 1)[1]
        == 24,
    }
    shifts = [(r, c) for r, c in itertools.product(range(-10, 11), repeat=2) if 0 < r * r + c * c <= 100]
    for kind in ("mi", "cc", "pi"):
        best = similarity(kind, roi, roi)
        checks[f"{kind}_argmax"] = all(similarity(kind, roi, shift_image(roi, r, c)) < best for r, c in shifts)
    dt = time.perf_counter() - t0
    ok = all(checks.values()) and dt < 10.0
    failed = [k for k, v in checks.items() if not v]
    acceptance_log(3, ok, f"{len(checks)} identities, {len(shifts)} shifts per measure, failed {failed}, {dt:.2f} s")
    assert ok


def test_criterion_04_gradient_check(acceptance_log):
    arch = Architecture(height=24, width=24, conv_channels=4, positionwise=4, hidden=8)
    m = CnnModel(arch, seed=0, dtype=np.float64)
    kinds = {type(layer) for layer in m.layers}
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=(2, 16, 24, 24)), rng.normal(size=(2, 2))
    t0 = time.perf_counter()
    res = gradient_check(m, x, y, eps=1e-3)
    dt = time.perf_counter() - t0
    covered = {Conv2D, BatchNorm2D, PositionwiseDense, Dense} <= kinds
    ok = covered and max(res["worst"]) < 1e-3 and res["smooth_violations"] == 0 and dt < 30.0
    acceptance_log(
        4,
        ok,
        f"{res['checked']} parameters, max rel err {max(res['worst']):.2e}, "
        f"{res['crossings']} kink crossings skipped in unfrozen pass, {dt:.1f} s",
    )
    assert ok


def test_criterion_05_overfit_one_sample(acceptance_log):
    rng = np.random.default_rng(5)
    m = CnnModel(Architecture(height=25, width=25), seed=0)
    x = rng.normal(size=(1, 16, 25, 25)).astype(np.float32)
    y = np.array([[7.0, -12.0]], dtype=np.float32)
    t0 = time.perf_counter()
    initial = m.loss(x, y)
    cfg = TrainConfig(learning_rate=1e-3, batch_size=1, epochs=1)
    train(m, np.repeat(x, 200, axis=0), np.repeat(y, 200, axis=0), cfg)
    final = m.loss(x, y)
    dt = time.perf_counter() - t0
    ok = final < 0.01 * initial and dt < 30.0
    acceptance_log(5, ok, f"loss {initial:.3g} -> {final:.3g} ({100 * final / initial:.3f}%), {dt:.1f} s")
    assert ok


def test_criterion_06_dataset_counts(acceptance_log, repro_runs):
    paper, desk = PROFILES["paper"]["spec"], DESK["spec"]
    per_test = len(shift_grid(paper))
    arithmetic = (
        per_test == 36
        and paper.samples_per_volume == 500
        and len(paper.test_phantoms) * per_test == 900
        and len(paper.train_phantoms) * paper.samples_per_volume == 12500
        and len(desk.test_phantoms) * len(shift_grid(desk)) == 72
        and len(desk.train_phantoms) * desk.samples_per_volume == 1000
    )
    out = repro_runs[0][0]
    n_test = load_dataset(out / "test.ds").tensors.shape[0]
    n_train = load_dataset(out / "train.ds").tensors.shape[0]
    ok = arithmetic and n_test == 72 and n_train == 1000
    acceptance_log(6, ok, f"paper 900/12500 arithmetic {arithmetic}; desk files hold {n_test} test, {n_train} train")
    assert ok


def test_criterion_07_simplex_cc_recovery(acceptance_log):
    geom = DESK["geometry"]
    mv = MvSimConfig().noise_free()
    golds = [Displacement2D(a, b) for a, b in itertools.product((-10.0, -5.0, 5.0, 10.0), repeat=2)]
    grid = np.arange(-25.0, 25.0 + 1e-9, 0.5)
    t0 = time.perf_counter()
    hits = total = unique = 0
    for vol in make_volumes(DESK["spec"].test_phantoms):
        chain = imaging_chain(vol, geom, mv, 100.0)
        tests = [chain.rendered_image(g) for g in golds]
        for g, img in zip(golds, tests):
            trace = register_classical(RegistrationCase(vol, geom, img, g), "cc", OptimizerConfig(), 100.0, mv)
            hits += np.hypot(*(trace.final.as_array() - g.as_array())) <= 2.0
            total += 1
        # oracle: CC over the whole grid, one render per grid point shared by all cases
        rows = np.stack([_unit(center_crop(img, chain.roi_px).data) for img in tests])
        maps = np.empty((len(golds), grid.size, grid.size))
        for i, a in enumerate(grid):
            for j, b in enumerate(grid):
                maps[:, i, j] = rows @ _unit(chain.rendered_roi(Displacement2D(a, b)).data)
        for g, cc_map in zip(golds, maps):
            unique += _single_basin_at(cc_map, grid, g)
    dt = time.perf_counter() - t0
    rate = hits / total
    ok = rate >= 0.95 and unique == total and dt < 300.0
    acceptance_log(7, ok, f"recovered {hits}/{total} within 2 mm; unique CC basin at gold {unique}/{total}; {dt:.0f} s")
    assert ok


def _unit(a):
    a = np.asarray(a, dtype=np.float64).ravel()
    a = a - a.mean()
    return a / np.linalg.norm(a)


def _single_basin_at(cc_map, grid, gold):
    from scipy.ndimage import maximum_filter

    peaks = cc_map == maximum_filter(cc_map, size=3, mode="constant", cval=-np.inf)
    i, j = np.unravel_index(np.argmax(cc_map), cc_map.shape)
    return int(peaks.sum() == 1 and np.hypot(grid[i] - gold.lateral_mm, grid[j] - gold.longitudinal_mm) <= 0.5)


def test_criterion_08_cnn_iteration_trend(acceptance_log, repro_runs):
    out = repro_runs[0][0]
    rows = {r["method"]: r for r in read_report_csv((out / "cnn_iterations.csv").read_text())}
    means = [rows[f"CNN-{k}iter"]["mean"] for k in (1, 2, 3)]
    fprs = [rows[f"CNN-{k}iter"]["fpr_percent"] for k in (1, 2, 3)]
    timings = json.loads((out / "timings.json").read_text())
    cfg = json.loads((out / "config.json").read_text())
    cnn_time = timings["dataset_s"] + timings["train_s"] + timings["register_CNN_s"]
    decreasing = means[0] > means[1] > means[2]
    ok = decreasing and fprs[2] <= 0.7 * fprs[0] and cfg["train"]["epochs"] >= 20 and cnn_time < 900
    acceptance_log(
        8,
        ok,
        "mean " + " > ".join(f"{m:.2f}" for m in means) + " mm; FPR "
        + " -> ".join(f"{f:.1f}" for f in fprs) + f" % (limit {0.7 * fprs[0]:.1f}); {cnn_time:.0f} s",
    )
    assert ok


def test_criterion_09_determinism(acceptance_log, repro_runs):
    (a, ta), (b, tb) = repro_runs
    same = all((a / n).read_bytes() == (b / n).read_bytes() for n in ("report.csv", "cnn_iterations.csv"))
    acceptance_log(9, same, f"report.csv byte-identical across two runs ({ta:.0f} s, {tb:.0f} s)")
    assert same


def test_criterion_10_accumulation(acceptance_log, repro_runs):
    out = repro_runs[0][0]
    traces = cli.read_traces([out / "traces" / "CNN.jsonl"])
    exact = 0
    for recs in traces:
        acc = Displacement2D(*recs[0]["displacement"])
        for rec in recs:
            acc = acc + Displacement2D(*rec["delta"])
        exact += [acc.lateral_mm, acc.longitudinal_mm] == recs[-1]["result"]
    ok = len(traces) == 72 and exact == len(traces)
    acceptance_log(10, ok, f"{exact}/{len(traces)} CNN traces satisfy final == initial + sum(deltas) exactly")
    assert ok
