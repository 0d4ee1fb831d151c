"""Autoregressive Gaussian splitting network.

Layer 0 Gaussians are embedded once. Each split step duplicates the node
features ``k`` times (copy-major), runs one multi-head graph-attention layer
over the next layer's extended mesh graph, adds the duplicated features back
as a residual, decodes child attributes and predicts the child gate.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .gating import LayerMask, duplicate_rows, init_mask, mask_predict, propagate_mask
from .gaussians import ATTRIBUTE_DIM, GaussianSet, LayerScale, RawGaussianParams, activate
from .mesh import DEFAULT_VERTEX_CAP, LayerTopology, MeshGraph, extend, to_adjacency

MASK_HIDDEN = 64


@dataclass(frozen=True)
class GsnShape:
    feature_dim: int = 256
    heads: int = 4
    decoder_hidden: int = 256
    layers: int = 3
    shared: bool = False

    @property
    def head_dim(self) -> int:
        if self.feature_dim % self.heads:
            raise ValueError("feature_dim must be divisible by heads")
        return self.feature_dim // self.heads

    def layer_prefix(self, i: int) -> str:
        """Parameter prefix for the step producing layer ``i`` (1-based)."""
        return "split" if self.shared else f"split{i}"


def _uniform(rng, fan_in: int, shape) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def init_params(shape: GsnShape, seed: int = 0) -> dict[str, Tensor]:
    """Uniform +-1/sqrt(fan_in) initialisation from a fixed seed."""
    rng = np.random.default_rng(seed)
    d, hd = shape.feature_dim, shape.head_dim
    p: dict[str, Tensor] = {
        "embed.w1": _uniform(rng, ATTRIBUTE_DIM, (ATTRIBUTE_DIM, d)),
        "embed.b1": _uniform(rng, ATTRIBUTE_DIM, (d,)),
        "embed.w2": _uniform(rng, d, (d, d)),
        "embed.b2": _uniform(rng, d, (d,)),
    }
    prefixes = sorted({shape.layer_prefix(i) for i in range(1, shape.layers + 1)})
    for pre in prefixes:
        p[f"{pre}.gat.w"] = _uniform(rng, d, (d, d))
        p[f"{pre}.gat.att"] = _uniform(rng, 2 * hd, (shape.heads, 2 * hd))
        p[f"{pre}.gat.mix_w"] = _uniform(rng, d, (d, d))
        p[f"{pre}.gat.mix_b"] = _uniform(rng, d, (d,))
        p[f"{pre}.dec.w1"] = _uniform(rng, d, (d, shape.decoder_hidden))
        p[f"{pre}.dec.b1"] = _uniform(rng, d, (shape.decoder_hidden,))
        p[f"{pre}.dec.w2"] = _uniform(rng, shape.decoder_hidden, (shape.decoder_hidden, ATTRIBUTE_DIM))
        p[f"{pre}.dec.b2"] = _uniform(rng, shape.decoder_hidden, (ATTRIBUTE_DIM,))
        p[f"{pre}.mask.w1"] = _uniform(rng, d, (d, MASK_HIDDEN))
        p[f"{pre}.mask.b1"] = _uniform(rng, d, (MASK_HIDDEN,))
        p[f"{pre}.mask.w2"] = _uniform(rng, MASK_HIDDEN, (MASK_HIDDEN, 1))
        p[f"{pre}.mask.b2"] = _uniform(rng, MASK_HIDDEN, (1,))
    return p


def _mlp2(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    h = dc.leaky_relu(dc.add_rows(x @ params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    return dc.add_rows(h @ params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def embed(g: GaussianSet, params: dict[str, Tensor]) -> Tensor:
    return _mlp2(g.attributes(), params, "embed")


def duplicate(features: Tensor, k: int) -> Tensor:
    return duplicate_rows(features, k)


def gat_layer(features: Tensor, src: np.ndarray, dst: np.ndarray, params: dict[str, Tensor],
              prefix: str, heads: int) -> Tensor:
    """Multi-head graph attention over directed edges (src -> dst)."""
    n, d = features.shape
    hd = d // heads
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    if len(src) and max(src.max(), dst.max()) >= n:
        raise ValueError("edge endpoint beyond feature rows")
    if len(np.unique(dst)) != n:
        raise ValueError("every vertex needs at least one incoming edge (add self loops)")

    # rows of the (n*heads, hd) view are (vertex, head) pairs
    proj = dc.reshape(features @ params[f"{prefix}.gat.w"], (n * heads, hd))
    att = params[f"{prefix}.gat.att"]
    head_of_row = np.tile(np.arange(heads), n)
    att_src = dc.gather(dc.columns(att, 0, hd), head_of_row)
    att_dst = dc.gather(dc.columns(att, hd, 2 * hd), head_of_row)
    s_src = dc.tensor_sum(proj * att_src, axis=1)
    s_dst = dc.tensor_sum(proj * att_dst, axis=1)

    h = np.arange(heads)
    src_r = (src[:, None] * heads + h).reshape(-1)
    dst_r = (dst[:, None] * heads + h).reshape(-1)
    logits = dc.leaky_relu(dc.gather(s_src, src_r) + dc.gather(s_dst, dst_r))
    alpha = dc.segment_softmax(logits, dst_r)
    msg = dc.gather(proj, src_r) * dc.outer(alpha, hd)
    agg = dc.reshape(dc.scatter_add(msg, dst_r, n * heads), (n, d))
    return dc.add_rows(agg @ params[f"{prefix}.gat.mix_w"], params[f"{prefix}.gat.mix_b"])


def attention_weights(features: Tensor, src, dst, params, prefix: str, heads: int) -> np.ndarray:
    """(E, heads) attention coefficients, for inspection and tests."""
    n, d = features.shape
    hd = d // heads
    proj = (features.data @ params[f"{prefix}.gat.w"].data).reshape(n, heads, hd)
    att = params[f"{prefix}.gat.att"].data
    s_src = (proj * att[None, :, :hd]).sum(-1)
    s_dst = (proj * att[None, :, hd:]).sum(-1)
    out = np.zeros((len(src), heads))
    for h in range(heads):
        logits = dc.leaky_relu(Tensor(s_src[src, h] + s_dst[dst, h]))
        out[:, h] = dc.segment_softmax(logits, dst).data
    return out


@dataclass
class LayerState:
    gaussians: GaussianSet
    features: Tensor | None
    mask: LayerMask
    soft_mask: Tensor | None = None


def decode(features: Tensor, params: dict[str, Tensor], prefix: str) -> RawGaussianParams:
    return RawGaussianParams.from_logits(_mlp2(features, params, f"{prefix}.dec"))


def split_layer(state: LayerState, topo_next: LayerTopology, scale_next: LayerScale,
                params: dict[str, Tensor], shape: GsnShape, prefix: str) -> LayerState:
    k = topo_next.k
    n_parent = state.features.shape[0]
    if n_parent * k != topo_next.extended.vertex_count:
        raise ValueError(f"{n_parent} parent rows * k={k} does not match "
                         f"{topo_next.extended.vertex_count} vertices of layer {topo_next.layer}")
    f_dup = duplicate(state.features, k)
    src, dst = to_adjacency(topo_next)
    f_next = gat_layer(f_dup, src, dst, params, prefix, shape.heads) + f_dup
    raw = decode(f_next, params, prefix)
    parents = duplicate_rows(state.gaussians.positions, k)
    g_next = activate(raw, parents, scale_next)
    soft = mask_predict(f_next, params, f"{prefix}.mask")
    return LayerState(g_next, f_next, propagate_mask(state.mask, soft, k), soft)


def run_autoregressive(g0: GaussianSet, params: dict[str, Tensor], shape: GsnShape, base: MeshGraph,
                       k: int, layers: int, scales: list[LayerScale],
                       vertex_cap: int = DEFAULT_VERTEX_CAP) -> list[LayerState]:
    """Layers 0..L; layer 0 carries an all-ones mask and no gate."""
    if layers < 0:
        raise ValueError("layers must be >= 0")
    if len(g0) != base.vertex_count:
        raise ValueError("layer-0 set must have one Gaussian per base vertex")
    topos = [extend(base, k, i, vertex_cap) for i in range(1, layers + 1)]
    features = embed(g0, params) if layers > 0 else None
    state = LayerState(g0, features, init_mask(len(g0)))
    out = [state]
    for i, topo in enumerate(topos, start=1):
        state = split_layer(state, topo, scales[i], params, shape, shape.layer_prefix(i))
        out.append(state)
    return out


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"GSPLITCK"
CKPT_VERSION = 1


def save_checkpoint(path: str | Path, params: dict[str, Tensor], layers: int, meta: dict[str, str] | None = None) -> None:
    """Little-endian blob: magic, version, layer count, metadata, then named f64 tensors."""
    meta = meta or {}
    out = bytearray(CKPT_MAGIC)
    out += struct.pack("<III", CKPT_VERSION, layers, len(meta))
    for key in sorted(meta):
        for s in (key, str(meta[key])):
            b = s.encode("utf-8")
            out += struct.pack("<I", len(b)) + b
    out += struct.pack("<I", len(params))
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name].data, dtype="<f8")
        b = name.encode("utf-8")
        out += struct.pack("<I", len(b)) + b
        out += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += arr.tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path: str | Path) -> tuple[dict[str, Tensor], int, dict[str, str]]:
    blob = Path(path).read_bytes()
    if blob[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise ValueError("not a checkpoint file")
    pos = len(CKPT_MAGIC)

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, blob, pos)
        pos += struct.calcsize(fmt)
        return vals

    def take_str():
        nonlocal pos
        (n,) = take("<I")
        s = blob[pos:pos + n].decode("utf-8")
        pos += n
        return s

    version, layers, n_meta = take("<III")
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    meta = {}
    for _ in range(n_meta):
        key = take_str()
        meta[key] = take_str()
    (n_params,) = take("<I")
    params = {}
    for _ in range(n_params):
        name = take_str()
        (ndim,) = take("<I")
        shape = take(f"<{ndim}Q") if ndim else ()
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(shape)
        pos += 8 * count
        params[name] = Tensor(arr.astype(np.float64), requires_grad=True)
    return params, layers, meta
