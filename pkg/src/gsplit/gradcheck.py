"""Finite-difference gradient checks, grouped by module.

Each check builds a small randomized scalar function and compares backward
gradients with central differences. Used by ``gsplit gradcheck`` and the tests.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffcore as dc
from .diffcore import FDReport, Tensor, fd_check
from .gating import duplicate_rows, init_mask, propagate_mask
from .gaussians import RawGaussianParams, activate, layer_scale
from .gsn import GsnShape, init_params, run_autoregressive
from .losses import l1_image, nearest_point_loss
from .mesh import tetrahedron
from .raster import look_at, render_tensor

SMOOTH_TOL = 1e-6
GRAPH_TOL = 1e-4
RASTER_TOL = 1e-3


@dataclass
class CheckResult:
    module: str
    name: str
    report: FDReport

    @property
    def passed(self) -> bool:
        return self.report.passed


def _param(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(scale * rng.normal(size=shape), requires_grad=True)


# ---------------------------------------------------------------------------
# diffcore
# ---------------------------------------------------------------------------

def diffcore_cases(seed: int = 0) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    rng = np.random.default_rng(seed)
    a, b = _param(rng, 4, 3), _param(rng, 4, 3)
    pos = Tensor(rng.uniform(0.5, 2.0, size=(4, 3)), requires_grad=True)
    m = _param(rng, 3, 5)
    row = _param(rng, 3)
    col = _param(rng, 4)
    seg = np.array([0, 0, 1, 1, 1, 2, 3, 3])
    logits = _param(rng, 8)
    vec = _param(rng, 8, 2)
    idx = np.array([2, 0, 2, 1, 3])
    w: dict[tuple, np.ndarray] = {}

    def lin(t):  # one fixed random weight array per output shape
        if t.shape not in w:
            w[t.shape] = rng.normal(size=t.shape)
        return dc.tensor_sum(t * Tensor(w[t.shape]))

    # leaky_relu needs inputs away from the kink
    lr_in = Tensor(np.where(rng.random((4, 3)) < 0.5, -1, 1) * rng.uniform(0.2, 1.0, (4, 3)), requires_grad=True)
    return {
        "add/sub/mul": (lambda: lin(a * b + a - b * 2.0), [a, b]),
        "div": (lambda: lin(a / pos), [a, pos]),
        "exp": (lambda: lin(dc.exp(a)), [a]),
        "log": (lambda: lin(dc.log(pos)), [pos]),
        "tanh": (lambda: lin(dc.tanh(a)), [a]),
        "sigmoid": (lambda: lin(dc.sigmoid(a * 3.0)), [a]),
        "leaky_relu": (lambda: lin(dc.leaky_relu(lr_in)), [lr_in]),
        "sqrt": (lambda: lin(dc.sqrt(pos)), [pos]),
        "square": (lambda: lin(dc.square(a)), [a]),
        "matmul": (lambda: lin(a @ m), [a, m]),
        "outer/add_rows": (lambda: lin(dc.add_rows(dc.outer(col, 3) * a, row)), [a, col, row]),
        "transpose/reshape": (lambda: lin(dc.reshape(dc.transpose(a), (2, 6)) * 1.5), [a]),
        "sum/mean": (lambda: lin(dc.tensor_sum(dc.square(a), axis=0)) + dc.mean(dc.exp(b)), [a, b]),
        "concat/columns": (lambda: lin(dc.columns(dc.concat([a, b], axis=1), 1, 5)), [a, b]),
        "gather/scatter_add": (lambda: lin(dc.scatter_add(dc.square(dc.gather(a, idx)), idx, 4)), [a]),
        "segment_softmax": (lambda: lin(dc.outer(dc.segment_softmax(logits, seg), 2) * vec), [logits, vec]),
    }


def check_diffcore(seed: int = 0, max_entries: int | None = None) -> list[CheckResult]:
    out = []
    for name, (f, params) in diffcore_cases(seed).items():
        rep = fd_check(f, params, h=1e-6, tol_rel=SMOOTH_TOL, max_entries=max_entries, abs_floor=1e-6)
        out.append(CheckResult("diffcore", name, rep))
    return out


# ---------------------------------------------------------------------------
# gaussian-model
# ---------------------------------------------------------------------------

def check_gaussians(seed: int = 0, max_entries: int | None = None) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    n = 6
    logits = _param(rng, n, 14, scale=0.7)
    parents = rng.uniform(-0.5, 0.5, size=(n, 3))
    scale = layer_scale(1, 1.5)
    wts = [rng.normal(size=s) for s in ((n, 3), (n, 4), (n, 3), (n,), (n, 3))]

    def f():
        g = activate(RawGaussianParams.from_logits(logits), parents, scale)
        return sum((dc.tensor_sum(t * Tensor(w)) for t, w in zip(g.tensors(), wts)), Tensor(0.0))

    rep = fd_check(f, [logits], h=1e-5, tol_rel=SMOOTH_TOL, max_entries=max_entries, abs_floor=1e-6)
    return [CheckResult("gaussian-model", "activate", rep)]


# ---------------------------------------------------------------------------
# gsn (split layers + losses)
# ---------------------------------------------------------------------------

def gsn_problem(seed: int = 0, k: int = 2, layers: int = 2, feature_dim: int = 8, heads: int = 2):
    """Small end-to-end graph: free layer 0 -> L split steps -> lifting/split losses.

    Mask-net output weights are zeroed so the keep bits are constant; the
    straight-through path is checked separately under gating.
    """
    rng = np.random.default_rng(seed)
    base, _ = tetrahedron()
    shape = GsnShape(feature_dim, heads, feature_dim, layers)
    params = init_params(shape, seed)
    for name, t in params.items():
        if name.endswith(".mask.w2"):
            t.data[:] = 0.0
        if name.endswith(".mask.b2"):
            t.data[:] = 2.0
    raw0 = _param(rng, base.vertex_count, 14, scale=0.5)
    scales = [layer_scale(i, 1.5) for i in range(layers + 1)]
    ref = base.positions + 0.05 * rng.normal(size=base.positions.shape)
    weights = rng.normal(size=(sum(base.vertex_count * k ** i for i in range(1, layers + 1)), 14))

    def f():
        g0 = activate(RawGaussianParams.from_logits(raw0), base.positions, scales[0])
        states = run_autoregressive(g0, params, shape, base, k, layers, scales)
        split = dc.concat([s.gaussians.positions for s in states[1:]])
        attrs = dc.concat([s.gaussians.attributes() for s in states[1:]])
        return (nearest_point_loss(ref, split) + nearest_point_loss(ref, g0.positions)
                + dc.mean(dc.square(attrs * Tensor(weights))))

    free = [raw0] + [t for n, t in sorted(params.items()) if ".mask." not in n]
    return f, free


def check_gsn(seed: int = 0, max_entries: int | None = 4) -> list[CheckResult]:
    f, params = gsn_problem(seed)
    rep = fd_check(f, params, h=1e-6, tol_rel=GRAPH_TOL, max_entries=max_entries, abs_floor=1e-6)
    return [CheckResult("gsn", "split layers + losses", rep)]


# ---------------------------------------------------------------------------
# gating
# ---------------------------------------------------------------------------

def ste_gradient_gap(seed: int = 0, n: int = 5, k: int = 2, h: float = 1e-6) -> FDReport:
    """STE gradient of a two-level composite vs. central differences of its surrogates.

    For the child soft mask the surrogate is ``m_next * M_dup`` with ``M_dup``
    held at its forward (binary) value; for the parent soft mask it is
    ``m_next * m_parent`` since the parent composite's own surrogate is
    ``m_parent``.
    """
    rng = np.random.default_rng(seed)
    parent_soft = Tensor(rng.uniform(0.05, 0.95, size=n), requires_grad=True)
    child_soft = Tensor(rng.uniform(0.05, 0.95, size=n * k), requires_grad=True)
    w = Tensor(rng.normal(size=n * k))

    parent_soft.grad = child_soft.grad = None
    parent = propagate_mask(init_mask(n), parent_soft, 1)
    dc.tensor_sum(propagate_mask(parent, child_soft, k).composite * w).backward()
    parent_bits = Tensor(duplicate_rows(parent.composite, k).data)

    surrogates = [
        (parent_soft, parent_soft.grad.copy(), lambda: dc.tensor_sum(child_soft * duplicate_rows(parent_soft, k) * w)),
        (child_soft, child_soft.grad.copy(), lambda: dc.tensor_sum(child_soft * parent_bits * w)),
    ]
    errs = []
    for p, analytic, f in surrogates:
        worst = 0.0
        for i in range(p.size):
            orig = p.data[i]
            p.data[i] = orig + h
            up = f().item()
            p.data[i] = orig - h
            down = f().item()
            p.data[i] = orig
            num = (up - down) / (2 * h)
            worst = max(worst, abs(analytic[i] - num) / max(abs(analytic[i]), abs(num), 1e-8))
        errs.append(worst)
    return FDReport(errs, SMOOTH_TOL, [parent_soft.size, child_soft.size])


def check_gating(seed: int = 0, max_entries: int | None = None) -> list[CheckResult]:
    return [CheckResult("gating", "STE composite vs surrogate", ste_gradient_gap(seed))]


# ---------------------------------------------------------------------------
# rasterizer
# ---------------------------------------------------------------------------

def raster_problem(seed: int = 0, n: int = 5, size: int = 16):
    rng = np.random.default_rng(seed)
    cam = look_at((0.0, 0.0, -3.0), (0.0, 0.0, 0.0), size, size, 20.0)
    anchors = rng.uniform(-0.25, 0.25, size=(n, 3))
    logits = Tensor(np.concatenate([
        rng.normal(scale=0.3, size=(n, 3)),   # offsets
        rng.normal(scale=0.3, size=(n, 4)),   # quaternion
        rng.normal(scale=0.3, size=(n, 3)),   # scales
        rng.normal(scale=0.3, size=(n, 1)),   # opacity
        rng.normal(size=(n, 3)),              # colour
    ], axis=1), requires_grad=True)
    scale = layer_scale(0, 1.0, opacity0=0.9, scale_frac=0.25, offset_frac=0.2)
    weights = rng.normal(size=(size, size, 3))

    def f():
        g = activate(RawGaussianParams.from_logits(logits), anchors, scale)
        return dc.tensor_sum(render_tensor(g, cam) * Tensor(weights))

    return f, [logits]


def check_rasterizer(seed: int = 0, max_entries: int | None = None) -> list[CheckResult]:
    f, params = raster_problem(seed)
    rep = fd_check(f, params, h=1e-7, tol_rel=RASTER_TOL, max_entries=max_entries, abs_floor=1e-6)
    return [CheckResult("rasterizer", "5 splats, 16x16", rep)]


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def check_losses(seed: int = 0, max_entries: int | None = None) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    img = Tensor(rng.uniform(size=(8, 8, 3)), requires_grad=True)
    target = img.data + rng.choice([-1, 1], size=img.shape) * rng.uniform(0.05, 0.2, size=img.shape)
    cand = _param(rng, 10, 3)
    ref = rng.normal(size=(6, 3))
    out = [
        CheckResult("losses-metrics", "l1_image", fd_check(lambda: l1_image(img, target), [img], h=1e-6,
                                                          tol_rel=SMOOTH_TOL, max_entries=max_entries)),
        CheckResult("losses-metrics", "nearest_point", fd_check(lambda: nearest_point_loss(ref, cand), [cand],
                                                               h=1e-6, tol_rel=SMOOTH_TOL, abs_floor=1e-6,
                                                               max_entries=max_entries)),
    ]
    return out


CHECKS = {
    "diffcore": check_diffcore,
    "gaussian-model": check_gaussians,
    "gsn": check_gsn,
    "gating": check_gating,
    "rasterizer": check_rasterizer,
    "losses-metrics": check_losses,
}


def run_all(scale: str = "small", seed: int = 0) -> list[CheckResult]:
    """``small`` subsamples large parameters; ``full`` checks every entry."""
    if scale not in ("small", "full"):
        raise ValueError("scale must be 'small' or 'full'")
    results = []
    for name, check in CHECKS.items():
        if name == "gsn":
            results += check(seed, 4 if scale == "small" else 24)
        else:
            results += check(seed, 16 if scale == "small" else None)
    return results
