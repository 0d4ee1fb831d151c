"""Gaussian attribute containers, constrained activations and covariances."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

SCALE_EPS = 1e-6
QUAT_TOL = 1e-6
ATTRIBUTE_DIM = 14  # position 3, rotation 4, scale 3, opacity 1, color 3
_FIELDS = ("positions", "rotations", "scales", "opacities", "colors")


@dataclass
class GaussianSet:
    """Structure of arrays; every field is a :class:`Tensor`.

    positions (N,3), rotations (N,4) unit quaternions (w,x,y,z), scales (N,3),
    opacities (N,), colors (N,3).
    """

    positions: Tensor
    rotations: Tensor
    scales: Tensor
    opacities: Tensor
    colors: Tensor

    def __post_init__(self):
        n = self.positions.shape[0]
        shapes = {
            "positions": (n, 3), "rotations": (n, 4), "scales": (n, 3),
            "opacities": (n,), "colors": (n, 3),
        }
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    def __len__(self) -> int:
        return self.positions.shape[0]

    @classmethod
    def from_arrays(cls, positions, rotations, scales, opacities, colors, requires_grad=False) -> "GaussianSet":
        return cls(*(Tensor(np.asarray(a, dtype=np.float64), requires_grad=requires_grad)
                     for a in (positions, rotations, scales, opacities, colors)))

    def tensors(self) -> tuple[Tensor, ...]:
        return tuple(getattr(self, f) for f in _FIELDS)

    def arrays(self) -> tuple[np.ndarray, ...]:
        return tuple(t.data for t in self.tensors())

    def detach(self) -> "GaussianSet":
        return GaussianSet(*(t.detach() for t in self.tensors()))

    def subset(self, keep) -> "GaussianSet":
        keep = np.flatnonzero(np.asarray(keep))
        return GaussianSet(*(dc.gather(t, keep) for t in self.tensors()))

    def attributes(self) -> Tensor:
        """Per-Gaussian 14-vector used as network input."""
        op = dc.reshape(self.opacities, (len(self), 1))
        return dc.concat([self.positions, self.rotations, self.scales, op, self.colors], axis=1)

    def validate(self) -> None:
        pos, rot, scl, opa, col = self.arrays()
        if not all(np.all(np.isfinite(a)) for a in (pos, rot, scl, opa, col)):
            raise ValueError("non-finite Gaussian attribute")
        if np.any(np.abs(np.linalg.norm(rot, axis=1) - 1.0) > 1e-9):
            raise ValueError("rotation is not a unit quaternion")
        if np.any(scl <= 0):
            raise ValueError("non-positive scale")
        if np.any((opa < 0) | (opa > 1)) or np.any((col < 0) | (col > 1)):
            raise ValueError("opacity/color outside [0, 1]")


def concat(sets: list[GaussianSet]) -> GaussianSet:
    if not sets:
        raise ValueError("concat needs at least one set")
    if len(sets) == 1:
        return sets[0]
    return GaussianSet(*(dc.concat([getattr(s, f) for s in sets], axis=0) for f in _FIELDS))


@dataclass(frozen=True)
class LayerScale:
    """Per-layer caps on opacity, scale and position offset (world units)."""

    layer: int
    opacity_cap: float
    scale_cap: float
    position_offset_cap: float


def layer_scale(layer: int, extent: float, opacity0: float = 0.8, scale_frac: float = 0.05,
                offset_frac: float = 0.1, decay: float = 0.5) -> LayerScale:
    """Geometric schedule: every cap shrinks by ``decay`` per layer."""
    if not 0.0 < decay < 1.0:
        raise ValueError("decay must lie in (0, 1) so caps strictly decrease")
    f = decay ** layer
    return LayerScale(layer, opacity0 * f, scale_frac * extent * f, offset_frac * extent * f)


@dataclass
class RawGaussianParams:
    """Unconstrained logits, typically the columns of a decoder output."""

    position_delta: Tensor
    quaternion: Tensor
    scale: Tensor
    opacity: Tensor
    color: Tensor

    @classmethod
    def from_logits(cls, logits: Tensor) -> "RawGaussianParams":
        if logits.ndim != 2 or logits.shape[1] != ATTRIBUTE_DIM:
            raise ValueError(f"expected (N, {ATTRIBUTE_DIM}) logits, got {logits.shape}")
        n = logits.shape[0]
        return cls(
            dc.columns(logits, 0, 3),
            dc.columns(logits, 3, 7),
            dc.columns(logits, 7, 10),
            dc.reshape(dc.columns(logits, 10, 11), (n,)),
            dc.columns(logits, 11, 14),
        )

    @classmethod
    def zeros(cls, n: int, requires_grad: bool = True) -> "RawGaussianParams":
        return cls(*(Tensor(np.zeros(s), requires_grad=requires_grad)
                     for s in ((n, 3), (n, 4), (n, 3), (n,), (n, 3))))

    def tensors(self) -> tuple[Tensor, ...]:
        return (self.position_delta, self.quaternion, self.scale, self.opacity, self.color)


def normalize_rows(q: Tensor) -> Tensor:
    norm = dc.sqrt(dc.tensor_sum(dc.square(q), axis=1))
    return dc.div(q, dc.outer(norm, q.shape[1]))


def activate(raw: RawGaussianParams, parent_positions, scale: LayerScale) -> GaussianSet:
    """Map logits to a valid Gaussian set anchored at ``parent_positions``."""
    for t in raw.tensors():
        if not np.all(np.isfinite(t.data)):
            raise ValueError("activate: non-finite input")
    parent = dc.as_tensor(parent_positions)
    n = raw.position_delta.shape[0]
    if parent.shape != (n, 3):
        raise ValueError(f"parent positions {parent.shape} do not match {n} Gaussians")
    positions = parent + dc.tanh(raw.position_delta) * scale.position_offset_cap
    rotations = normalize_rows(dc.add_rows(raw.quaternion, np.array([1.0, 0.0, 0.0, 0.0])))
    scales = dc.sigmoid(raw.scale) * scale.scale_cap + SCALE_EPS
    opacities = dc.sigmoid(raw.opacity) * scale.opacity_cap
    colors = dc.sigmoid(raw.color)
    return GaussianSet(positions, rotations, scales, opacities, colors)


# ---------------------------------------------------------------------------
# covariance
# ---------------------------------------------------------------------------

def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for (..., 4) quaternions (w, x, y, z); no normalisation."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    r = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return r.reshape(q.shape[:-1] + (3, 3))


def rotmat_grad_to_quat(q: np.ndarray, d_r: np.ndarray) -> np.ndarray:
    """Pull a (..., 3, 3) gradient on R back onto the quaternion of :func:`quat_to_rotmat`."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    g = d_r
    dw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0] - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    dx = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0] - 2 * x * g[..., 1, 1] - w * g[..., 1, 2]
              + z * g[..., 2, 0] + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    dy = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2] + x * g[..., 1, 0] + z * g[..., 1, 2]
              - w * g[..., 2, 0] + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    dz = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2] + w * g[..., 1, 0] - 2 * z * g[..., 1, 1]
              + y * g[..., 1, 2] + x * g[..., 2, 0] + y * g[..., 2, 1])
    return np.stack([dw, dx, dy, dz], axis=-1)


def covariance(rotation, scale) -> np.ndarray:
    """R S S^T R^T for one Gaussian or a batch of them."""
    q = np.asarray(rotation, dtype=np.float64)
    s = np.asarray(scale, dtype=np.float64)
    if np.any(np.abs(np.linalg.norm(q, axis=-1) - 1.0) > QUAT_TOL):
        raise ValueError("covariance: quaternion is not unit length")
    if np.any(s <= 0):
        raise ValueError("covariance: scales must be positive")
    return covariance_unchecked(q, s)


def covariance_unchecked(q: np.ndarray, s: np.ndarray) -> np.ndarray:
    m = quat_to_rotmat(q) * s[..., None, :]
    return m @ np.swapaxes(m, -1, -2)


# ---------------------------------------------------------------------------
# PLY export
# ---------------------------------------------------------------------------

_SH_C0 = 0.28209479177387814
_PLY_PROPS = (["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity"]
              + [f"scale_{i}" for i in range(3)] + [f"rot_{i}" for i in range(4)])


def write_ply(path: str | Path, g: GaussianSet) -> None:
    """Binary little-endian PLY in the usual splat-viewer layout.

    Viewers expect logit opacity, log scale and DC spherical-harmonic colour.
    """
    pos, rot, scl, opa, col = g.arrays()
    n = len(g)
    opa = np.clip(opa, 1e-7, 1 - 1e-7)
    rows = np.concatenate([
        pos, np.zeros((n, 3)), (col - 0.5) / _SH_C0,
        np.log(opa / (1 - opa))[:, None], np.log(scl), rot,
    ], axis=1).astype("<f4")
    header = "ply\nformat binary_little_endian 1.0\n" f"element vertex {n}\n"
    header += "".join(f"property float {p}\n" for p in _PLY_PROPS) + "end_header\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(rows.tobytes())


def read_ply(path: str | Path) -> GaussianSet:
    blob = Path(path).read_bytes()
    end = blob.index(b"end_header\n") + len(b"end_header\n")
    header = blob[:end].decode("ascii").splitlines()
    n = next(int(l.split()[2]) for l in header if l.startswith("element vertex"))
    props = [l.split()[2] for l in header if l.startswith("property")]
    if props != _PLY_PROPS:
        raise ValueError("unexpected PLY property layout")
    rows = np.frombuffer(blob[end:], dtype="<f4", count=n * len(props)).reshape(n, -1).astype(np.float64)
    opa = 1.0 / (1.0 + np.exp(-rows[:, 9]))
    return GaussianSet.from_arrays(rows[:, 0:3], rows[:, 13:17], np.exp(rows[:, 10:13]), opa,
                                   rows[:, 6:9] * _SH_C0 + 0.5)
