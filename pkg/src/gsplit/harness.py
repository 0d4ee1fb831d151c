"""Fit-to-target harness: config, synthetic scenes, Adam and the training loop."""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .gaussians import GaussianSet, LayerScale, RawGaussianParams, activate, concat, layer_scale, write_ply
from .gating import duplicate_rows
from .gsn import GsnShape, LayerState, init_params, load_checkpoint, run_autoregressive, save_checkpoint
from .losses import LossWeights, l1_image, psnr, ssim, total_loss
from .mesh import DEFAULT_VERTEX_CAP, MeshGraph, load_mesh
from .raster import Camera, look_at, render, render_tensor, write_ppm

log = logging.getLogger(__name__)

DATA_DIR = Path(__file__).parent / "data"
DEMO_MESH = DATA_DIR / "icosahedron.obj"
DEMO_CONFIG = DATA_DIR / "demo.cfg"


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class FitConfig:
    base_mesh: str = str(DEMO_MESH)
    k: int = 2
    layers: int = 3
    feature_dim: int = 256
    heads: int = 4
    decoder_hidden: int = 256
    learning_rate: float = 1e-4      # network weights
    free_learning_rate: float = 1e-2  # free per-Gaussian logits (layer 0 and identity set)
    steps: int = 100
    image_size: int = 64
    focal: float = 100.0
    cameras: str = "0,0,-3"          # ';'-separated eye positions, all looking at the origin
    seed: int = 0
    scene_seed: int = 1
    scene_gaussians: int = 24
    scene_layout: str = "cube"       # "cube": uniform in [-0.5,0.5]^3, "mesh": jittered around base vertices
    scene_jitter: float = 0.1        # fraction of the extent, "mesh" layout only
    scene_scale_min: float = 0.03
    scene_scale_max: float = 0.1
    lambda_p: float = 0.5
    lambda_l: float = 1.0
    lambda_s: float = 0.5
    opacity_cap: float = 0.8
    scale_frac: float = 0.05
    offset_frac: float = 0.1
    cap_decay: float = 0.5
    scene_extent: float = 0.0        # 0 = bounding-box diagonal of the base mesh
    identity_set_size: int = 32
    identity_opacity_cap: float = 1.0
    identity_scale_frac: float = 0.1
    identity_offset_frac: float = 0.5
    share_gsn_params: bool = False
    mask_l1_weight: float = 0.0
    mask_init_bias: float = 0.0
    log_every: int = 10
    vertex_cap: int = DEFAULT_VERTEX_CAP

    def __post_init__(self):
        if self.k < 1 or self.layers < 0 or self.steps < 0:
            raise ValueError("config needs k >= 1, layers >= 0, steps >= 0")
        if self.learning_rate <= 0 or self.free_learning_rate <= 0:
            raise ValueError("learning rates must be positive")
        if self.scene_layout not in ("cube", "mesh"):
            raise ValueError(f"scene_layout must be 'cube' or 'mesh', got {self.scene_layout!r}")
        if self.identity_set_size < 0 or self.scene_gaussians < 1:
            raise ValueError("identity_set_size must be >= 0 and scene_gaussians >= 1")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_p, self.lambda_l, self.lambda_s)

    def camera_eyes(self) -> list[np.ndarray]:
        return [np.array([float(v) for v in c.split(",")]) for c in self.cameras.split(";") if c.strip()]

    def make_cameras(self) -> list[Camera]:
        s = self.image_size
        return [look_at(eye, (0.0, 0.0, 0.0), s, s, self.focal) for eye in self.camera_eyes()]

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(name: str, kind, raw: str):
    raw = raw.strip()
    if kind in (bool, "bool"):
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"{name}: not a boolean: {raw!r}")
    if kind in (int, "int"):
        return int(raw)
    if kind in (float, "float"):
        return float(raw)
    return raw


def parse_config(text: str, overrides: dict[str, str] | None = None) -> FitConfig:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    types = {f.name: f.type for f in dataclasses.fields(FitConfig)}
    values: dict[str, object] = {}
    items: list[tuple[str, str]] = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        key, val = line.split("=", 1)
        items.append((key.strip(), val))
    items += list((overrides or {}).items())
    for key, val in items:
        if key not in types:
            raise ValueError(f"unknown config key {key!r}")
        values[key] = _coerce(key, types[key], str(val))
    return FitConfig(**values)


def load_config(path: str | Path, overrides: dict[str, str] | None = None) -> FitConfig:
    path = Path(path)
    cfg = parse_config(path.read_text(), overrides)
    mesh = Path(cfg.base_mesh)
    if not mesh.is_absolute() and not mesh.exists() and (path.parent / mesh).exists():
        cfg.base_mesh = str(path.parent / mesh)
    return cfg


# ---------------------------------------------------------------------------
# synthetic scene
# ---------------------------------------------------------------------------

@dataclass
class SyntheticScene:
    reference: GaussianSet
    cameras: list[Camera]
    targets: list[np.ndarray]


def random_gaussians(rng: np.random.Generator, n: int, scale_range=(0.03, 0.1), opacity_range=(0.6, 1.0),
                     colors=None, anchors=None, jitter: float = 0.1) -> GaussianSet:
    if anchors is None:
        pos = rng.uniform(-0.5, 0.5, size=(n, 3))
    else:
        anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 3)
        pos = anchors[rng.integers(len(anchors), size=n)] + rng.normal(scale=jitter, size=(n, 3))
        pos = np.clip(pos, -0.5, 0.5)
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    scl = rng.uniform(*scale_range, size=(n, 3))
    opa = rng.uniform(*opacity_range, size=n)
    col = rng.uniform(0.0, 1.0, size=(n, 3)) if colors is None else np.broadcast_to(np.asarray(colors, float), (n, 3))
    return GaussianSet.from_arrays(pos, q, scl, opa, col)


def make_scene(seed: int, n_gaussians: int, cameras: list[Camera], colors=None,
               anchors=None, jitter: float = 0.1, scale_range=(0.03, 0.1)) -> SyntheticScene:
    """Random reference Gaussians and their renders.

    Centres are uniform in the unit cube [-0.5, 0.5]^3, or, when ``anchors`` is
    given, normally jittered (std ``jitter``) around randomly chosen anchors.
    """
    if n_gaussians < 1:
        raise ValueError("need at least one Gaussian")
    ref = random_gaussians(np.random.default_rng(seed), n_gaussians, colors=colors,
                           anchors=anchors, jitter=jitter, scale_range=scale_range)
    return SyntheticScene(ref, cameras, [render(ref, None, cam) for cam in cameras])


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              lr: float | dict[str, float], beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    """Bias-corrected Adam, in place on ``params``.

    ``lr`` is either one rate or a per-parameter mapping.
    """
    for name in sorted(params):
        g = grads.get(name)
        if g is not None and not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name in sorted(params):
        p = params[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        rate = lr[name] if isinstance(lr, dict) else lr
        p.data -= rate * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return state


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

def scene_extent(cfg: FitConfig, base: MeshGraph) -> float:
    if cfg.scene_extent > 0:
        return cfg.scene_extent
    lo, hi = base.positions.min(axis=0), base.positions.max(axis=0)
    return float(np.linalg.norm(hi - lo))


@dataclass
class Model:
    cfg: FitConfig
    base: MeshGraph
    params: dict[str, Tensor]      # optimised
    buffers: dict[str, np.ndarray]  # fixed (identity anchors)

    @property
    def shape(self) -> GsnShape:
        c = self.cfg
        return GsnShape(c.feature_dim, c.heads, c.decoder_hidden, c.layers, c.share_gsn_params)

    @property
    def extent(self) -> float:
        return scene_extent(self.cfg, self.base)

    def layer_scales(self) -> list[LayerScale]:
        c = self.cfg
        return [layer_scale(i, self.extent, c.opacity_cap, c.scale_frac, c.offset_frac, c.cap_decay)
                for i in range(c.layers + 1)]

    def identity_scale(self) -> LayerScale:
        c = self.cfg
        return LayerScale(-1, c.identity_opacity_cap, c.identity_scale_frac * self.extent,
                          c.identity_offset_frac * self.extent)


def build_model(cfg: FitConfig, base: MeshGraph | None = None) -> Model:
    base = base if base is not None else load_mesh(cfg.base_mesh)
    if base.positions is None:
        raise ValueError("base mesh needs vertex positions")
    shape = GsnShape(cfg.feature_dim, cfg.heads, cfg.decoder_hidden, cfg.layers, cfg.share_gsn_params)
    params = init_params(shape, cfg.seed) if cfg.layers > 0 else {}
    params["gen.raw0"] = Tensor(np.zeros((base.vertex_count, 14)), requires_grad=True)
    rng = np.random.default_rng(cfg.seed + 7919)
    m = cfg.identity_set_size
    buffers = {"identity.anchor": rng.uniform(-0.5, 0.5, size=(m, 3))}
    if m:
        raw = np.zeros((m, 14))
        raw[:, 3:7] = 0.1 * rng.normal(size=(m, 4))
        params["identity.raw"] = Tensor(raw, requires_grad=True)
    for name, t in params.items():
        if name.endswith(".mask.b2"):
            t.data[:] = cfg.mask_init_bias
    return Model(cfg, base, params, buffers)


@dataclass
class Forward:
    identity: GaussianSet | None
    layers: list[LayerState]
    gaussians: GaussianSet
    gate: Tensor
    layer_slices: list[slice]

    @property
    def masks(self):
        return [s.mask for s in self.layers]

    def logical_mask(self) -> np.ndarray:
        return self.gate.data > 0


def forward(model: Model) -> Forward:
    cfg, p = model.cfg, model.params
    scales = model.layer_scales()
    g0 = activate(RawGaussianParams.from_logits(p["gen.raw0"]), model.base.positions, scales[0])
    layers = run_autoregressive(g0, p, model.shape, model.base, cfg.k, cfg.layers, scales, cfg.vertex_cap)
    sets, gates, slices = [], [], []
    start = 0
    identity = None
    if "identity.raw" in p:
        identity = activate(RawGaussianParams.from_logits(p["identity.raw"]),
                            model.buffers["identity.anchor"], model.identity_scale())
        sets.append(identity)
        gates.append(Tensor(np.ones(len(identity))))
        start = len(identity)
    for st in layers:
        n = len(st.gaussians)
        sets.append(st.gaussians)
        gates.append(st.mask.composite)
        slices.append(slice(start, start + n))
        start += n
    return Forward(identity, layers, concat(sets), dc.concat(gates), slices)


def max_gaussians(cfg: FitConfig, n0: int) -> int:
    if cfg.k == 1:
        return cfg.identity_set_size + n0 * (cfg.layers + 1)
    return cfg.identity_set_size + n0 * (cfg.k ** (cfg.layers + 1) - 1) // (cfg.k - 1)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

METRIC_FIELDS = ["step", "l1", "lifting", "split", "total", "psnr", "ssim"]


@dataclass
class Evaluation:
    report: object
    images: list[np.ndarray]
    fwd: Forward
    row: dict[str, object]


def own_offset_positions(parent, child, k: int) -> Tensor:
    """Child positions whose gradient stops at the parent.

    Same values as ``child.gaussians.positions``; a loss on them moves only the
    child's own offset, never the parent layer it hangs from.
    """
    anchor = duplicate_rows(parent.gaussians.positions, k)
    return child.gaussians.positions - anchor + dc.stop_gradient(anchor)


def evaluate(model: Model, scene: SyntheticScene, step: int) -> Evaluation:
    cfg = model.cfg
    fwd = forward(model)
    rendered = [render_tensor(fwd.gaussians, cam, fwd.gate) for cam in scene.cameras]
    split_layers = fwd.layers[1:]
    if split_layers:
        split_pos = dc.concat([own_offset_positions(fwd.layers[i - 1], fwd.layers[i], cfg.k)
                               for i in range(1, len(fwd.layers))])
        split_act = np.concatenate([s.mask.logical for s in split_layers])
    else:
        split_pos, split_act = None, None
    ident_pos = fwd.identity.positions if fwd.identity is not None else None
    rep = total_loss(rendered, scene.targets, model.base.positions, ident_pos, split_pos, split_act, cfg.weights)
    if cfg.mask_l1_weight > 0 and split_layers:
        soft = dc.concat([s.soft_mask for s in split_layers])
        rep.total_tensor = rep.total_tensor + dc.mean(soft) * cfg.mask_l1_weight
        rep.total = rep.total_tensor.item()
    images = [r.data for r in rendered]
    row: dict[str, object] = {
        "step": step, "l1": rep.image, "lifting": rep.lifting, "split": rep.split, "total": rep.total,
        "psnr": float(np.mean([psnr(i, t) for i, t in zip(images, scene.targets)])),
        "ssim": float(np.mean([ssim(i, t) for i, t in zip(images, scene.targets)])),
    }
    for i, s in enumerate(fwd.layers):
        row[f"active_{i}"] = int(np.count_nonzero(s.mask.logical))
    for i, s in enumerate(fwd.layers):
        row[f"survival_{i}"] = row[f"active_{i}"] / len(s.mask)
    return Evaluation(rep, images, fwd, row)


@dataclass
class FitResult:
    rows: list[dict[str, object]]
    model: Model
    scene: SyntheticScene
    images: list[np.ndarray]
    run_dir: Path | None = None

    @property
    def final(self) -> dict[str, object]:
        return self.rows[-1]


def scene_for(cfg: FitConfig, base: MeshGraph | None = None) -> SyntheticScene:
    scales = (cfg.scene_scale_min, cfg.scene_scale_max)
    if cfg.scene_layout == "cube":
        return make_scene(cfg.scene_seed, cfg.scene_gaussians, cfg.make_cameras(), scale_range=scales)
    base = base if base is not None else load_mesh(cfg.base_mesh)
    return make_scene(cfg.scene_seed, cfg.scene_gaussians, cfg.make_cameras(), anchors=base.positions,
                      jitter=cfg.scene_jitter * scene_extent(cfg, base), scale_range=scales)


def metrics_csv(rows: list[dict[str, object]]) -> str:
    buf = io.StringIO()
    fields = list(rows[0].keys()) if rows else METRIC_FIELDS
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


FREE_PREFIXES = ("gen.", "identity.")


def learning_rates(cfg: FitConfig, params: dict[str, Tensor]) -> dict[str, float]:
    """Free per-Gaussian logits use ``free_learning_rate``; network weights ``learning_rate``."""
    return {n: cfg.free_learning_rate if n.startswith(FREE_PREFIXES) else cfg.learning_rate for n in params}


def fit(cfg: FitConfig, run_dir: str | Path | None = None, base: MeshGraph | None = None) -> FitResult:
    model = build_model(cfg, base)
    scene = scene_for(cfg, model.base)
    rates = learning_rates(cfg, model.params)
    state = AdamState()
    rows = []
    ev = None
    for step in range(cfg.steps + 1):
        ev = evaluate(model, scene, step)
        if not np.isfinite(ev.report.total):
            raise FloatingPointError(f"loss diverged at step {step}")
        if step % max(cfg.log_every, 1) == 0 or step == cfg.steps:
            rows.append(ev.row)
            log.info("step %d total %.5f psnr %.2f", step, ev.row["total"], ev.row["psnr"])
        if step == cfg.steps:
            break
        for t in model.params.values():
            t.grad = None
        ev.report.total_tensor.backward()
        grads = {n: t.grad for n, t in model.params.items() if t.grad is not None}
        try:
            adam_step(model.params, grads, state, rates)
        except FloatingPointError as exc:
            raise FloatingPointError(f"step {step}: {exc}") from exc

    result = FitResult(rows, model, scene, ev.images)
    if run_dir is not None:
        result.run_dir = write_run(result, run_dir)
    return result


def checkpoint_meta(cfg: FitConfig) -> dict[str, str]:
    return {"config": cfg.to_text()}


def save_model(path: str | Path, model: Model) -> None:
    tensors = dict(model.params)
    for name, arr in model.buffers.items():
        tensors[f"buffer.{name}"] = Tensor(arr)
    save_checkpoint(path, tensors, model.cfg.layers, checkpoint_meta(model.cfg))


def load_model(path: str | Path) -> Model:
    tensors, layers, meta = load_checkpoint(path)
    cfg = parse_config(meta["config"])
    if cfg.layers != layers:
        raise ValueError("checkpoint layer count does not match its config")
    buffers = {n[len("buffer."):]: t.data for n, t in tensors.items() if n.startswith("buffer.")}
    params = {n: t for n, t in tensors.items() if not n.startswith("buffer.")}
    return Model(cfg, load_mesh(cfg.base_mesh), params, buffers)


def render_model(model: Model, cameras: list[Camera] | None = None) -> list[np.ndarray]:
    fwd = forward(model)
    cams = cameras if cameras is not None else model.cfg.make_cameras()
    mask = fwd.logical_mask()
    return [render(fwd.gaussians, mask, cam) for cam in cams]


def active_gaussians(model: Model) -> GaussianSet:
    fwd = forward(model)
    return fwd.gaussians.subset(fwd.logical_mask()).detach()


def write_run(result: FitResult, run_dir: str | Path) -> Path:
    run = Path(run_dir)
    (run / "images").mkdir(parents=True, exist_ok=True)
    (run / "config.cfg").write_text(result.model.cfg.to_text())
    (run / "metrics.csv").write_text(metrics_csv(result.rows))
    for i, (img, tgt) in enumerate(zip(result.images, result.scene.targets)):
        write_ppm(run / "images" / f"render_{i}.ppm", img)
        write_ppm(run / "images" / f"target_{i}.ppm", tgt)
    save_model(run / "ckpt", result.model)
    write_ply(run / "splats.ply", active_gaussians(result.model))
    return run


def l1_of(images, targets) -> float:
    return float(np.mean([l1_image(i, t).item() for i, t in zip(images, targets)]))
