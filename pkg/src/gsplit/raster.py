"""Differentiable tile-based splat rasterizer.

Forward: EWA projection of every Gaussian, one global front-to-back sort by
(depth, source index), then per 16x16 tile front-to-back alpha compositing
over a black background. The per-pixel accumulation is written with
sequential ``cumprod``/``cumsum`` so that it performs the same float
operations, in the same order, as the scalar loop in :func:`composite_pixel`;
the tiled image is therefore bit-identical to :func:`render_oracle`.

Backward: analytic gradients through compositing, the Gaussian falloff, the
2D covariance inversion, the projection Jacobian and R S S^T R^T.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .gaussians import GaussianSet, quat_to_rotmat, rotmat_grad_to_quat

DILATION = 0.3
ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4
TILE = 16


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    near: float = 0.01
    mode: str = "perspective"

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0 or self.near <= 0:
            raise ValueError("camera needs fx, fy, near > 0")
        if self.mode not in ("perspective", "orthographic"):
            raise ValueError(f"unknown camera mode {self.mode!r}")


def look_at(eye, target, width: int, height: int, focal: float, up=(0.0, 1.0, 0.0), near: float = 0.01) -> Camera:
    """Perspective camera at ``eye`` looking at ``target`` (view +z forward, +y down)."""
    eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
    z = target - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-12:
        x = np.cross(z, np.array([1.0, 0.0, 0.0]))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    rot = np.stack([x, y, z])
    return Camera(focal, focal, (width - 1) / 2.0, (height - 1) / 2.0, width, height,
                  rot, -rot @ eye, near)


@dataclass
class ProjectedSplat:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    color: np.ndarray
    alpha: float
    source_index: int

    @property
    def conic(self) -> tuple[float, float, float]:
        a, b, c = self.cov2d[0, 0], self.cov2d[0, 1], self.cov2d[1, 1]
        det = a * c - b * b
        if det <= 0:
            raise ValueError("singular 2D covariance")
        return c / det, -b / det, a / det


@dataclass
class Projection:
    """Vectorised projection of the retained (not culled) Gaussians."""

    index: np.ndarray      # source indices of retained Gaussians
    view: np.ndarray       # (n, 3) view-space centres
    mean2d: np.ndarray     # (n, 2)
    cov2d: np.ndarray      # (n, 2, 2)
    conic: np.ndarray      # (n, 3) a, b, c of the inverse covariance
    jac: np.ndarray        # (n, 2, 3)
    cov_view: np.ndarray   # (n, 3, 3) W Sigma W^T
    rotmat: np.ndarray     # (n, 3, 3)

    @property
    def depth(self) -> np.ndarray:
        return self.view[:, 2]

    def splats(self, colors: np.ndarray, opacities: np.ndarray) -> list[ProjectedSplat]:
        return [ProjectedSplat(self.mean2d[i], self.cov2d[i], float(self.depth[i]), colors[s],
                               float(opacities[s]), int(s)) for i, s in enumerate(self.index)]


def project_arrays(positions, rotations, scales, cam: Camera) -> Projection:
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    view = positions @ cam.rotation.T + cam.translation
    keep = np.flatnonzero(view[:, 2] > cam.near)
    t = view[keep]
    q = np.asarray(rotations, dtype=np.float64).reshape(-1, 4)[keep]
    s = np.asarray(scales, dtype=np.float64).reshape(-1, 3)[keep]
    rot = quat_to_rotmat(q)
    m = rot * s[:, None, :]
    sigma = m @ np.swapaxes(m, 1, 2)
    w = cam.rotation
    cov_view = w @ sigma @ w.T

    n = len(keep)
    jac = np.zeros((n, 2, 3))
    if cam.mode == "perspective":
        tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
        jac[:, 0, 0] = cam.fx / tz
        jac[:, 0, 2] = -cam.fx * tx / (tz * tz)
        jac[:, 1, 1] = cam.fy / tz
        jac[:, 1, 2] = -cam.fy * ty / (tz * tz)
        mean2d = np.stack([cam.fx * tx / tz + cam.cx, cam.fy * ty / tz + cam.cy], axis=1)
    else:
        jac[:, 0, 0] = cam.fx
        jac[:, 1, 1] = cam.fy
        mean2d = np.stack([cam.fx * t[:, 0] + cam.cx, cam.fy * t[:, 1] + cam.cy], axis=1)

    cov2d = jac @ cov_view @ np.swapaxes(jac, 1, 2)
    cov2d[:, 0, 0] += DILATION
    cov2d[:, 1, 1] += DILATION
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    if np.any(det <= 0):
        raise ValueError("singular 2D covariance")
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    return Projection(keep, t, mean2d, cov2d, conic, jac, cov_view, rot)


def project(g: GaussianSet, cam: Camera) -> list[ProjectedSplat]:
    pos, rot, scl, opa, col = g.arrays()
    return project_arrays(pos, rot, scl, cam).splats(col, opa)


def splat_alpha(dx, dy, ca, cb, cc, opacity):
    """Unclamped opacity * exp(-0.5 d^T conic d) and the falloff itself."""
    power = -0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy
    gauss = np.exp(power)
    return opacity * gauss, gauss


def composite_pixel(splats: list[ProjectedSplat], pixel) -> np.ndarray:
    """Front-to-back compositing of depth-sorted splats at one pixel."""
    px, py = float(pixel[0]), float(pixel[1])
    color = np.zeros(3)
    trans = 1.0
    for sp in splats:
        ca, cb, cc = sp.conic
        raw, _ = splat_alpha(np.float64(px - sp.mean2d[0]), np.float64(py - sp.mean2d[1]),
                             ca, cb, cc, np.float64(sp.alpha))
        a = min(raw, ALPHA_MAX)
        if a < ALPHA_MIN:
            continue
        w = a * trans
        color = color + sp.color * w
        trans = trans * (1.0 - a)
        if trans < T_MIN:
            break
    return color


def _sort_order(proj: Projection) -> np.ndarray:
    return np.lexsort((proj.index, proj.depth))


def render_oracle(g: GaussianSet, mask, cam: Camera) -> np.ndarray:
    """Brute force: every pixel walks every unmasked splat in depth order."""
    _check_size(cam)
    mask = np.asarray(mask).astype(bool)
    pos, rot, scl, opa, col = g.arrays()
    proj = project_arrays(pos[mask], rot[mask], scl[mask], cam)
    src = np.flatnonzero(mask)[proj.index]
    order = np.lexsort((src, proj.depth))
    ca, cb, cc = (proj.conic[order, i] for i in range(3))
    mx, my = proj.mean2d[order, 0], proj.mean2d[order, 1]
    o = opa[src[order]]
    c = col[src[order]]
    img = np.zeros((cam.height, cam.width, 3))
    for y in range(cam.height):
        for x in range(cam.width):
            raw, _ = splat_alpha(np.float64(x) - mx, np.float64(y) - my, ca, cb, cc, o)
            color = np.zeros(3)
            trans = 1.0
            for i in range(len(o)):
                a = min(raw[i], ALPHA_MAX)
                if a < ALPHA_MIN:
                    continue
                w = a * trans
                color = color + c[i] * w
                trans = trans * (1.0 - a)
                if trans < T_MIN:
                    break
            img[y, x] = color
    return np.clip(img, 0.0, 1.0)


def _check_size(cam: Camera) -> None:
    if cam.width <= 0 or cam.height <= 0:
        raise ValueError("zero-size image")


def _bound_radius(cov2d: np.ndarray, opacity: np.ndarray) -> np.ndarray:
    """Pixel radius beyond which opacity * falloff < 1/255 is guaranteed.

    At least 3 sigma; grows with opacity so the tile lists never drop a splat
    that the per-pixel rule would have kept. -1 marks never-visible splats.
    """
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    mid = 0.5 * (a + c)
    lam = mid + np.sqrt(np.maximum(mid * mid - (a * c - b * b), 0.0))
    with np.errstate(divide="ignore"):
        k = np.sqrt(2.0 * np.maximum(np.log(np.maximum(255.0 * opacity, 1e-300)), 0.0))
    r = np.sqrt(lam) * np.maximum(3.0, k) + 1.0
    return np.where(opacity >= ALPHA_MIN, r, -1.0)


@dataclass
class _TileState:
    ids: np.ndarray        # sorted-splat positions in this tile
    px: np.ndarray         # pixel x coords (P,)
    py: np.ndarray
    rows: np.ndarray       # flat pixel indices (P,)
    gauss: np.ndarray      # (P, n)
    raw: np.ndarray        # (P, n) unclamped effective alpha
    a: np.ndarray          # (P, n) used alpha (0 where skipped/after break)
    t_before: np.ndarray   # (P, n)
    alive: np.ndarray      # (P, n) bool, at or before the terminating splat
    color: np.ndarray      # (P, 3)


@dataclass
class RenderState:
    cam: Camera
    proj: Projection
    order: np.ndarray          # sorted positions into proj arrays
    eff_opacity: np.ndarray    # per source Gaussian
    probe_opacity: np.ndarray  # per source Gaussian, opacity ignoring the gate
    tiles: list[_TileState]
    image: np.ndarray


def _rasterize(proj: Projection, colors: np.ndarray, eff_opacity: np.ndarray,
               probe_opacity: np.ndarray, cam: Camera, keep_state: bool) -> RenderState:
    order = _sort_order(proj)
    src = proj.index[order]
    mean = proj.mean2d[order]
    conic = proj.conic[order]
    o_eff = eff_opacity[src]
    col = colors[src]
    radius = _bound_radius(proj.cov2d[order], probe_opacity[src])

    img = np.zeros((cam.height * cam.width, 3))
    tiles: list[_TileState] = []
    visible = radius >= 0
    lo_x, hi_x = mean[:, 0] - radius, mean[:, 0] + radius
    lo_y, hi_y = mean[:, 1] - radius, mean[:, 1] + radius
    for ty0 in range(0, cam.height, TILE):
        ty1 = min(ty0 + TILE, cam.height)
        in_y = visible & (hi_y >= ty0) & (lo_y <= ty1 - 1)
        for tx0 in range(0, cam.width, TILE):
            tx1 = min(tx0 + TILE, cam.width)
            ids = np.flatnonzero(in_y & (hi_x >= tx0) & (lo_x <= tx1 - 1))
            if len(ids) == 0:
                continue
            yy, xx = np.mgrid[ty0:ty1, tx0:tx1]
            px = xx.reshape(-1).astype(np.float64)
            py = yy.reshape(-1).astype(np.float64)
            rows = (yy * cam.width + xx).reshape(-1)
            raw, gauss = splat_alpha(px[:, None] - mean[ids, 0], py[:, None] - mean[ids, 1],
                                     conic[ids, 0], conic[ids, 1], conic[ids, 2], o_eff[ids])
            clamped = np.minimum(raw, ALPHA_MAX)
            a = np.where(clamped >= ALPHA_MIN, clamped, 0.0)
            t_after = np.cumprod(1.0 - a, axis=1)
            stop = t_after < T_MIN
            first = np.where(stop.any(axis=1), stop.argmax(axis=1), len(ids) - 1)
            alive = np.arange(len(ids))[None, :] <= first[:, None]
            a = np.where(alive, a, 0.0)
            t_before = np.empty_like(t_after)
            t_before[:, 0] = 1.0
            t_before[:, 1:] = t_after[:, :-1]
            w = a * t_before
            contrib = col[ids][None, :, :] * w[:, :, None]
            color = np.cumsum(contrib, axis=1)[:, -1, :]
            img[rows] = color
            if keep_state:
                tiles.append(_TileState(ids, px, py, rows, gauss, raw, a, t_before, alive, color))
    image = np.clip(img, 0.0, 1.0).reshape(cam.height, cam.width, 3)
    return RenderState(cam, proj, order, eff_opacity, probe_opacity, tiles, image)


def render(g: GaussianSet, mask, cam: Camera) -> np.ndarray:
    """Forward render; Gaussians with a zero mask entry are dropped before projection."""
    _check_size(cam)
    pos, rot, scl, opa, col = g.arrays()
    mask = np.ones(len(g), dtype=bool) if mask is None else np.asarray(mask).astype(bool)
    if mask.shape != (len(g),):
        raise ValueError("mask length must equal the number of Gaussians")
    keep = np.flatnonzero(mask)
    proj = project_arrays(pos[keep], rot[keep], scl[keep], cam)
    proj.index = keep[proj.index]
    return _rasterize(proj, col, opa, opa, cam, keep_state=False).image


def _forward_state(pos, rot, scl, opa, col, gate, cam: Camera) -> RenderState:
    _check_size(cam)
    proj = project_arrays(pos, rot, scl, cam)
    return _rasterize(proj, col, gate * opa, opa, cam, keep_state=True)


def _backward(state: RenderState, rot, scl, opa, col, gate, upstream: np.ndarray):
    cam, proj = state.cam, state.proj
    n_all = len(opa)
    g_img = np.asarray(upstream, dtype=np.float64).reshape(-1, 3)
    # clip(0, 1) passes gradient only where unclipped
    raw_img = np.zeros_like(g_img)
    for t in state.tiles:
        raw_img[t.rows] = t.color
    g_img = np.where((raw_img >= 0.0) & (raw_img <= 1.0), g_img, 0.0)

    order = state.order
    src_sorted = proj.index[order]
    mean = proj.mean2d[order]
    conic = proj.conic[order]
    col_sorted = col[src_sorted]
    o_eff = state.eff_opacity[src_sorted]
    o_probe = state.probe_opacity[src_sorted]
    gated = gate[src_sorted] == 0.0
    m = len(order)

    d_mean = np.zeros((m, 2))
    d_conic = np.zeros((m, 3))
    d_oeff = np.zeros(m)
    d_col = np.zeros((m, 3))
    for t in state.tiles:
        g = g_img[t.rows]                                     # (P, 3)
        ids = t.ids
        c = col_sorted[ids]                                   # (n, 3)
        w = t.a * t.t_before
        d_col[ids] += np.einsum("pc,pn->nc", g, w)
        # suffix sums: colour contributed by splats behind i
        contrib = c[None, :, :] * w[:, :, None]
        behind = t.color[:, None, :] - np.cumsum(contrib, axis=1)
        d_a = (np.einsum("pc,nc->pn", g, c) * t.t_before
               - np.einsum("pc,pnc->pn", g, behind) / (1.0 - t.a))
        d_a = np.where(t.alive, d_a, 0.0)

        is_gated = gated[ids][None, :]
        probe = o_probe[ids][None, :] * t.gauss
        active_ok = (t.raw >= ALPHA_MIN) & (t.raw < ALPHA_MAX)
        gated_ok = probe >= ALPHA_MIN
        d_raw = np.where(np.where(is_gated, gated_ok, active_ok), d_a, 0.0)

        d_oeff[ids] += (d_raw * t.gauss).sum(axis=0)
        d_power = d_raw * o_eff[ids][None, :] * t.gauss
        dx = t.px[:, None] - mean[ids, 0]
        dy = t.py[:, None] - mean[ids, 1]
        ca, cb, cc = conic[ids, 0], conic[ids, 1], conic[ids, 2]
        d_mean[ids, 0] += (d_power * (ca * dx + cb * dy)).sum(axis=0)
        d_mean[ids, 1] += (d_power * (cb * dx + cc * dy)).sum(axis=0)
        d_conic[ids, 0] += (d_power * (-0.5 * dx * dx)).sum(axis=0)
        d_conic[ids, 1] += (d_power * (-dx * dy)).sum(axis=0)
        d_conic[ids, 2] += (d_power * (-0.5 * dy * dy)).sum(axis=0)

    # back to projection order
    inv = np.empty(m, dtype=np.int64)
    inv[order] = np.arange(m)
    d_mean, d_conic, d_oeff, d_col = d_mean[inv], d_conic[inv], d_oeff[inv], d_col[inv]

    # conic = inverse(cov2d)
    k = np.stack([np.stack([proj.conic[:, 0], proj.conic[:, 1]], -1),
                  np.stack([proj.conic[:, 1], proj.conic[:, 2]], -1)], axis=1)
    gk = np.stack([np.stack([d_conic[:, 0], 0.5 * d_conic[:, 1]], -1),
                   np.stack([0.5 * d_conic[:, 1], d_conic[:, 2]], -1)], axis=1)
    g_cov2d = -k @ gk @ k                                       # symmetric (n, 2, 2)

    jac, cov_view = proj.jac, proj.cov_view
    g_jac = 2.0 * g_cov2d @ jac @ cov_view
    g_cov_view = np.swapaxes(jac, 1, 2) @ g_cov2d @ jac
    w_cam = cam.rotation
    g_sigma = w_cam.T @ g_cov_view @ w_cam
    s = scl[proj.index]
    rmat = proj.rotmat
    mmat = rmat * s[:, None, :]
    g_m = 2.0 * g_sigma @ mmat
    g_scale = (g_m * rmat).sum(axis=1)
    g_rot = rotmat_grad_to_quat(rot[proj.index], g_m * s[:, None, :])

    t = proj.view
    g_t = np.zeros_like(t)
    if cam.mode == "perspective":
        tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
        fx, fy = cam.fx, cam.fy
        g_t[:, 0] = d_mean[:, 0] * fx / tz - g_jac[:, 0, 2] * fx / (tz * tz)
        g_t[:, 1] = d_mean[:, 1] * fy / tz - g_jac[:, 1, 2] * fy / (tz * tz)
        g_t[:, 2] = (-d_mean[:, 0] * fx * tx / (tz * tz) - d_mean[:, 1] * fy * ty / (tz * tz)
                     - g_jac[:, 0, 0] * fx / (tz * tz) - g_jac[:, 1, 1] * fy / (tz * tz)
                     + 2.0 * g_jac[:, 0, 2] * fx * tx / tz ** 3 + 2.0 * g_jac[:, 1, 2] * fy * ty / tz ** 3)
    else:
        g_t[:, 0] = d_mean[:, 0] * cam.fx
        g_t[:, 1] = d_mean[:, 1] * cam.fy
    g_pos_kept = g_t @ w_cam

    out = {
        "positions": np.zeros((n_all, 3)), "rotations": np.zeros((n_all, 4)),
        "scales": np.zeros((n_all, 3)), "opacities": np.zeros(n_all),
        "colors": np.zeros((n_all, 3)), "gate": np.zeros(n_all),
    }
    idx = proj.index
    out["positions"][idx] = g_pos_kept
    out["rotations"][idx] = g_rot
    out["scales"][idx] = g_scale
    out["colors"][idx] = d_col
    out["opacities"][idx] = d_oeff * gate[idx]
    out["gate"][idx] = d_oeff * opa[idx]
    return out


def render_backward(g: GaussianSet, mask, cam: Camera, upstream) -> dict[str, np.ndarray]:
    """Gradients of ``sum(upstream * render(g, mask, cam))`` for every attribute and the mask."""
    pos, rot, scl, opa, col = g.arrays()
    gate = np.ones(len(g)) if mask is None else np.asarray(mask, dtype=np.float64)
    state = _forward_state(pos, rot, scl, opa, col, gate, cam)
    return _backward(state, rot, scl, opa, col, gate, upstream)


def render_tensor(g: GaussianSet, cam: Camera, gate: Tensor | None = None) -> Tensor:
    """Differentiable render as a graph node; ``gate`` multiplies opacity.

    Gate entries must be binary in the forward pass (delayed filtering). A
    gated-off splat still reports a gate gradient: the derivative of the
    image with respect to switching it on from zero opacity.
    """
    pos, rot, scl, opa, col = g.arrays()
    if gate is None:
        gate = Tensor(np.ones(len(g)))
    gv = gate.data
    if gv.shape != (len(g),):
        raise ValueError("gate length must equal the number of Gaussians")
    state = _forward_state(pos, rot, scl, opa, col, gv, cam)

    def backward(upstream):
        d = _backward(state, rot, scl, opa, col, gv, upstream)
        return d["positions"], d["rotations"], d["scales"], d["opacities"], d["colors"], d["gate"]

    return dc.function(state.image, (*g.tensors(), gate), backward, "render")


# ---------------------------------------------------------------------------
# image files
# ---------------------------------------------------------------------------

def write_ppm(path: str | Path, image: np.ndarray) -> None:
    img = np.asarray(image)
    h, w, _ = img.shape
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while not blob[pos:pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos].decode("ascii"))
    if tokens[0] != "P6":
        raise ValueError("not a binary PPM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    data = np.frombuffer(blob[pos + 1:pos + 1 + w * h * 3], dtype=np.uint8)
    return data.reshape(h, w, 3).astype(np.float64) / maxval
