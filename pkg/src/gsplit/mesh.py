"""Base mesh graphs and their layer-wise extended topologies.

A layer-``i`` graph holds ``k**i`` copies of the base mesh. Vertex ``(j, m)``
(original vertex ``j``, copy ``m``) lives at index ``m * |V0| + j``. Edges are
the base edges replicated inside every copy plus a clique joining all copies
of the same original vertex.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEFAULT_VERTEX_CAP = 1 << 20


@dataclass(frozen=True)
class MeshGraph:
    vertex_count: int
    edges: np.ndarray  # (E, 2) int64, canonical
    positions: np.ndarray | None = None

    def __post_init__(self):
        edges = canonical_edges(self.edges, self.vertex_count)
        object.__setattr__(self, "edges", edges)
        if self.positions is not None:
            pos = np.asarray(self.positions, dtype=np.float64)
            if pos.shape != (self.vertex_count, 3):
                raise ValueError(f"positions must be ({self.vertex_count}, 3), got {pos.shape}")
            object.__setattr__(self, "positions", pos)

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    def edge_set(self) -> set[tuple[int, int]]:
        return {(int(u), int(v)) for u, v in self.edges}


def canonical_edges(edges, vertex_count: int) -> np.ndarray:
    """Sort, orient (u < v), dedupe and drop self loops."""
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if e.size and (e.min() < 0 or e.max() >= vertex_count):
        raise ValueError("edge endpoint out of range")
    e = np.sort(e, axis=1)
    e = e[e[:, 0] != e[:, 1]]
    if len(e) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    return np.unique(e, axis=0)


def parse_mesh(obj_text: bytes | str) -> MeshGraph:
    """Parse Wavefront ``v``/``f`` records into a graph of face-boundary edges."""
    if isinstance(obj_text, bytes):
        obj_text = obj_text.decode("utf-8")
    verts: list[list[float]] = []
    faces: list[list[int]] = []
    for line in obj_text.splitlines():
        parts = line.split("#", 1)[0].split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            face = []
            for tok in parts[1:]:
                i = int(tok.split("/")[0])
                # negative indices are relative to the vertices read so far
                face.append(i - 1 if i > 0 else len(verts) + i)
            faces.append(face)
    n = len(verts)
    if n == 0:
        raise ValueError("mesh has no vertices")
    edges = []
    for face in faces:
        for a, b in zip(face, face[1:] + face[:1]):
            if not (0 <= a < n and 0 <= b < n):
                raise ValueError(f"face index out of range (mesh has {n} vertices)")
            edges.append((a, b))
    return MeshGraph(n, np.array(edges, dtype=np.int64).reshape(-1, 2), np.array(verts))


def load_mesh(path: str | Path) -> MeshGraph:
    return parse_mesh(Path(path).read_bytes())


def write_obj(mesh: MeshGraph, faces) -> str:
    lines = [f"v {float(x)!r} {float(y)!r} {float(z)!r}" for x, y, z in mesh.positions]
    lines += ["f " + " ".join(str(i + 1) for i in f) for f in faces]
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class LayerTopology:
    layer: int
    k: int
    base: MeshGraph
    extended: MeshGraph
    topo_edge_count: int
    conn_edge_count: int

    @property
    def copies(self) -> int:
        return self.k ** self.layer

    def vertex_index(self, j: int, m: int) -> int:
        return vertex_index(j, m, self)

    def split_index(self, idx: int) -> tuple[int, int]:
        """Inverse of :meth:`vertex_index`: extended index -> (j, m)."""
        n0 = self.base.vertex_count
        if not 0 <= idx < self.extended.vertex_count:
            raise IndexError(f"extended index {idx} out of range")
        return idx % n0, idx // n0


def vertex_index(j: int, m: int, topo: LayerTopology) -> int:
    n0 = topo.base.vertex_count
    if not 0 <= j < n0:
        raise IndexError(f"original index {j} out of range")
    if not 0 <= m < topo.copies:
        raise IndexError(f"copy index {m} out of range")
    return m * n0 + j


def extend(base: MeshGraph, k: int, layer: int, vertex_cap: int = DEFAULT_VERTEX_CAP) -> LayerTopology:
    """Build the layer graph directly from the base mesh."""
    if k < 1 or layer < 0:
        raise ValueError("need k >= 1 and layer >= 0")
    copies = k ** layer
    n0 = base.vertex_count
    if copies * n0 > vertex_cap:
        raise ValueError(f"layer {layer} with k={k} needs {copies * n0} vertices, cap is {vertex_cap}")

    offsets = (np.arange(copies, dtype=np.int64) * n0)[:, None, None]
    topo = (base.edges[None, :, :] + offsets).reshape(-1, 2)

    # clique over the copies of every original vertex
    conn_count = n0 * copies * (copies - 1) // 2
    if conn_count > 16 * vertex_cap:
        raise ValueError(f"layer {layer} with k={k} needs {conn_count} connection edges")
    pairs = np.stack(np.triu_indices(copies, 1), axis=1).astype(np.int64)
    j = np.arange(n0, dtype=np.int64)[:, None]
    conn = np.stack([pairs[:, 0][None, :] * n0 + j, pairs[:, 1][None, :] * n0 + j], axis=-1).reshape(-1, 2)

    positions = None
    if base.positions is not None:
        positions = np.tile(base.positions, (copies, 1))
    extended = MeshGraph(copies * n0, np.concatenate([topo, conn]), positions)
    return LayerTopology(layer, k, base, extended, len(topo), len(conn))


def to_adjacency(topo: LayerTopology | MeshGraph) -> tuple[np.ndarray, np.ndarray]:
    """Directed (src, dst) arrays: both directions of every edge plus self loops, sorted by (dst, src)."""
    g = topo.extended if isinstance(topo, LayerTopology) else topo
    n = g.vertex_count
    loops = np.arange(n, dtype=np.int64)
    src = np.concatenate([g.edges[:, 0], g.edges[:, 1], loops])
    dst = np.concatenate([g.edges[:, 1], g.edges[:, 0], loops])
    order = np.lexsort((src, dst))
    return src[order], dst[order]


def topology_counts(base: MeshGraph, k: int, layers: int) -> list[tuple[int, int, int, int]]:
    """(layer, vertices, topo_edges, conn_edges) rows from the closed-form counts."""
    rows = []
    for i in range(layers + 1):
        c = k ** i
        rows.append((i, base.vertex_count * c, c * base.edge_count, base.vertex_count * c * (c - 1) // 2))
    return rows


# ---------------------------------------------------------------------------
# built-in meshes
# ---------------------------------------------------------------------------

def triangle() -> tuple[MeshGraph, list[list[int]]]:
    pos = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    faces = [[0, 1, 2]]
    return _from_faces(pos, faces), faces


def tetrahedron() -> tuple[MeshGraph, list[list[int]]]:
    pos = np.array([[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]]) / np.sqrt(3.0)
    faces = [[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]]
    return _from_faces(pos, faces), faces


def icosahedron(radius: float = 1.0) -> tuple[MeshGraph, list[list[int]]]:
    phi = (1.0 + 5.0 ** 0.5) / 2.0
    pos = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=np.float64)
    pos *= radius / np.linalg.norm(pos[0])
    faces = [
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ]
    return _from_faces(pos, faces), faces


def icosphere(subdivisions: int, radius: float = 1.0) -> tuple[MeshGraph, list[list[int]]]:
    mesh, faces = icosahedron(radius)
    verts = [tuple(p) for p in mesh.positions]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = (np.array(verts[a]) + np.array(verts[b])) / 2.0
                m *= radius / np.linalg.norm(m)
                cache[key] = len(verts)
                verts.append(tuple(m))
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = new_faces
    return _from_faces(np.array(verts), faces), faces


def _from_faces(pos: np.ndarray, faces) -> MeshGraph:
    edges = [(a, b) for f in faces for a, b in zip(f, f[1:] + f[:1])]
    return MeshGraph(len(pos), np.array(edges, dtype=np.int64), pos)
