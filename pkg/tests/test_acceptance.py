"""Acceptance criteria 1-7, one test each, one PASS/FAIL line each.

Run directly (``python3 tests/test_acceptance.py``) to print only the
criterion lines, or under pytest where they appear in the summary section.
"""

from __future__ import annotations

import functools
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent))

import acceptance_log  # noqa: E402
from helpers import (brute_force_layer, delayed_filtering_gap, front_camera, gsn_permutation_gap,  # noqa: E402
                     hereditary_trial, random_graph, random_splats)
from gsplit import harness  # noqa: E402
from gsplit.cli import main as cli_main  # noqa: E402
from gsplit.diffcore import Tensor  # noqa: E402
from gsplit.gaussians import GaussianSet  # noqa: E402
from gsplit.gating import quantize  # noqa: E402
from gsplit.gradcheck import GRAPH_TOL, RASTER_TOL, SMOOTH_TOL, run_all  # noqa: E402
from gsplit.losses import nearest_point_loss  # noqa: E402
from gsplit.mesh import extend, icosahedron, tetrahedron, triangle  # noqa: E402
from gsplit.raster import Camera, render, render_oracle  # noqa: E402

# Thresholds for criterion 5, fixed from an oracle run of the shipped demo
# before freezing (k=2/L=2 reached 28.35 dB / SSIM 0.917 / L1 0.01033;
# k=1/L=0 reached L1 0.01115).
DEMO_MIN_PSNR = 25.0
DEMO_MIN_SSIM = 0.85


def criterion(number: int, title: str, limit_s: float | None = None):
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            t0 = time.perf_counter()
            try:
                detail = fn(*args, **kwargs)
                elapsed = time.perf_counter() - t0
                if limit_s is not None:
                    assert elapsed < limit_s, f"took {elapsed:.1f} s, limit {limit_s} s"
            except BaseException as exc:
                elapsed = time.perf_counter() - t0
                acceptance_log.LINES.append(f"FAIL  [{number}] {title} ({elapsed:.1f} s): {exc}")
                raise
            note = f": {detail}" if detail else ""
            acceptance_log.LINES.append(f"PASS  [{number}] {title} ({elapsed:.1f} s){note}")
        return run
    return wrap


@criterion(1, "topology formulas vs brute-force construction", limit_s=5)
def test_criterion_1_topology():
    rng = np.random.default_rng(1)
    meshes = [triangle()[0], tetrahedron()[0], icosahedron()[0]] + [random_graph(rng) for _ in range(30)]
    cases = 0
    for base in meshes:
        n0, e0 = base.vertex_count, base.edge_count
        for k in (1, 2, 3):
            for layer in range(4):
                c = k ** layer
                t = extend(base, k, layer)
                verts, topo, conn = brute_force_layer(base, k, layer)
                assert t.extended.vertex_count == n0 * c == len(verts)
                assert t.topo_edge_count == c * e0 == len(topo)
                assert t.conn_edge_count == n0 * c * (c - 1) // 2 == len(conn)
                assert t.extended.edge_set() == topo | conn
                cases += 1
    t = extend(tetrahedron()[0], 2, 1)
    assert (t.extended.vertex_count, t.extended.edge_count) == (8, 16)
    big = random_graph(np.random.default_rng(5023), n=5023, p=0.0005)
    assert extend(big, 2, 3).extended.vertex_count == 40184
    return f"{cases} (mesh, k, layer) cases"


@criterion(2, "tiled rasterizer equals per-pixel oracle", limit_s=1)
def test_criterion_2_oracle():
    rng = np.random.default_rng(2)
    g = random_splats(rng, 20, scale=(0.05, 0.3), opacity=(0.3, 1.0))
    cam = front_camera(32, focal=60.0)
    mask = np.ones(20, bool)
    tiled, oracle = render(g, mask, cam), render_oracle(g, mask, cam)
    assert np.array_equal(tiled, oracle), "tiled render differs from oracle"
    assert tiled.any()

    two = GaussianSet.from_arrays([[0, 0, 1.0], [0, 0, 2.0]], [[1.0, 0, 0, 0]] * 2, np.full((2, 3), 3.0),
                                  [0.5, 0.5], [[1.0, 0, 0], [0, 1.0, 0]])
    pixel = render(two, None, Camera(1.0, 1.0, 2.0, 2.0, 5, 5, mode="orthographic"))[2, 2]
    assert np.max(np.abs(pixel - [0.5, 0.25, 0.0])) <= 1e-12, pixel
    return "bit-identical; two-splat pixel within 1e-12"


@criterion(3, "finite-difference gradient checks", limit_s=60)
def test_criterion_3_gradients():
    results = run_all("full", seed=0)
    by_module = {}
    for r in results:
        assert r.passed, f"{r.module}/{r.name}: rel err {r.report.worst:.2e} >= {r.report.tol_rel:.0e}"
        by_module.setdefault(r.module, []).append(r)
    assert all(r.report.tol_rel == SMOOTH_TOL for r in by_module["diffcore"])
    (gsn,) = by_module["gsn"]
    (ras,) = by_module["rasterizer"]
    assert gsn.report.tol_rel == GRAPH_TOL and ras.report.tol_rel == RASTER_TOL
    worst = max(r.report.worst for r in by_module["diffcore"])
    return f"diffcore {worst:.1e}, gsn {gsn.report.worst:.1e}, rasterizer {ras.report.worst:.1e}"


@criterion(4, "gating semantics", limit_s=10)
def test_criterion_4_gating():
    from gsplit.gradcheck import ste_gradient_gap

    assert quantize(Tensor([0.5, 0.7])).data.tolist() == [0.0, 1.0]
    rng = np.random.default_rng(4)
    assert all(hereditary_trial(rng) for _ in range(1000)), "hereditary activity violated"
    gap = max(delayed_filtering_gap(rng) for _ in range(10))
    assert gap <= 1e-12, gap
    rep = ste_gradient_gap(seed=0)
    assert rep.passed, rep.max_rel_err
    return f"1000 chains; filtering gap {gap:.0e}; STE vs surrogate FD {rep.worst:.1e}"


@criterion(5, "splitting beats no splitting on the shipped demo", limit_s=300)
def test_criterion_5_demo():
    split = harness.fit(harness.load_config(harness.DEMO_CONFIG)).final
    flat = harness.fit(harness.load_config(harness.DEMO_CONFIG, {"k": "1", "layers": "0"})).final
    assert split["psnr"] >= DEMO_MIN_PSNR, f"PSNR {split['psnr']:.2f}"
    assert split["ssim"] >= DEMO_MIN_SSIM, f"SSIM {split['ssim']:.3f}"
    assert split["l1"] < flat["l1"], f"L1 k2L2 {split['l1']:.5f} vs k1L0 {flat['l1']:.5f}"
    return (f"k2L2 PSNR {split['psnr']:.2f} SSIM {split['ssim']:.3f} L1 {split['l1']:.5f}; "
            f"k1L0 L1 {flat['l1']:.5f}")


@criterion(6, "repeated fit is byte-identical")
def test_criterion_6_determinism(tmp_path, capsys):
    dirs = [tmp_path / "a", tmp_path / "b"]
    for d in dirs:
        assert cli_main(["fit", "--run-dir", str(d), "--steps", "40"]) == 0
    capsys.readouterr()
    for name in ("metrics.csv", "ckpt"):
        assert (dirs[0] / name).read_bytes() == (dirs[1] / name).read_bytes(), name
    return "metrics.csv and ckpt match"


@criterion(7, "GSN equivariance, render and nearest-point order invariance")
def test_criterion_7_invariance():
    gsn_gap = max(gsn_permutation_gap(seed, k=2 + seed % 2) for seed in range(100))
    assert gsn_gap < 1e-10, gsn_gap

    rng = np.random.default_rng(7)
    cam = front_camera(16, focal=25.0)
    for _ in range(100):
        n = int(rng.integers(2, 10))
        g = random_splats(rng, n)
        perm = rng.permutation(n)
        gp = GaussianSet.from_arrays(*(a[perm] for a in g.arrays()))
        assert np.array_equal(render(g, None, cam), render(gp, None, cam))

    for _ in range(100):
        ref, cand = rng.normal(size=(int(rng.integers(1, 20)), 3)), rng.normal(size=(int(rng.integers(1, 30)), 3))
        perm = rng.permutation(len(cand))
        a = nearest_point_loss(ref, Tensor(cand)).item()
        b = nearest_point_loss(ref, Tensor(cand[perm])).item()
        assert a == b
    return f"300 trials, GSN gap {gsn_gap:.0e}"


if __name__ == "__main__":
    import contextlib
    import io
    import tempfile

    class _NoCapture:
        def readouterr(self):
            return None

    tests = [test_criterion_1_topology, test_criterion_2_oracle, test_criterion_3_gradients,
             test_criterion_4_gating, test_criterion_5_demo, test_criterion_7_invariance]
    for t in tests:
        try:
            t()
        except Exception:
            pass
    with tempfile.TemporaryDirectory() as tmp, contextlib.redirect_stdout(io.StringIO()), \
            contextlib.redirect_stderr(io.StringIO()):
        try:
            test_criterion_6_determinism(Path(tmp), _NoCapture())
        except Exception:
            pass
    acceptance_log.LINES.sort(key=lambda line: int(line.split("[")[1].split("]")[0]))
    print("\n".join(acceptance_log.LINES))
    sys.exit(0 if all(line.startswith("PASS") for line in acceptance_log.LINES) else 1)
