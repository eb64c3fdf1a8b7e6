"""Point-cloud and triangle-mesh primitives."""

from __future__ import annotations

import json
import struct
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree

_CHUNK = 1 << 20


def as_points(points, name: str = "cloud") -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"{name}: expected (N, 3) points, got shape {pts.shape}")
    if len(pts) == 0:
        raise ValueError(f"{name}: empty point cloud")
    if not np.all(np.isfinite(pts)):
        raise ValueError(f"{name}: non-finite coordinates")
    return pts


def nearest_brute(queries: np.ndarray, cloud: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Exhaustive nearest neighbour: ``(index, squared distance)`` per query.

    Ties go to the lowest cloud index (``argmin`` returns the first minimum).
    """
    q = as_points(queries, "queries")
    c = as_points(cloud)
    rows = max(1, _CHUNK // len(c))
    idx = np.empty(len(q), dtype=np.int64)
    sq = np.empty(len(q))
    for start in range(0, len(q), rows):
        block = q[start : start + rows]
        d2 = ((block[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)
        j = np.argmin(d2, axis=1)
        idx[start : start + rows] = j
        sq[start : start + rows] = d2[np.arange(len(block)), j]
    return idx, sq


class KdTree:
    """Immutable spatial index whose answers match :func:`nearest_brute` exactly.

    Candidate search is delegated to scipy; near-ties are re-resolved with the
    exhaustive squared-distance formula and the lowest-index rule.
    """

    def __init__(self, points):
        self.points = as_points(points).copy()
        self.points.setflags(write=False)
        self._tree = cKDTree(self.points)

    def __len__(self) -> int:
        return len(self.points)

    def query(self, queries) -> Tuple[np.ndarray, np.ndarray]:
        q = as_points(queries, "queries")
        n = len(self.points)
        if n == 1:
            idx = np.zeros(len(q), dtype=np.int64)
        else:
            dist, nn = self._tree.query(q, k=2)
            idx = nn[:, 0].astype(np.int64)
            near_tie = dist[:, 1] <= dist[:, 0] * (1.0 + 1e-9) + 1e-300
            for row in np.flatnonzero(near_tie):
                r = dist[row, 1] * (1.0 + 1e-9) + 1e-300
                cand = np.asarray(self._tree.query_ball_point(q[row], r), dtype=np.int64)
                d2 = ((self.points[cand] - q[row]) ** 2).sum(axis=1)
                best = cand[d2 == d2.min()]
                idx[row] = best.min()
        sq = ((self.points[idx] - q) ** 2).sum(axis=1)
        return idx, sq


def nearest_surface_point(x, surface: KdTree) -> Tuple[np.ndarray, np.ndarray, int]:
    """Closest surface point ``p`` to ``x``, the displacement ``p - x`` and its index."""
    if len(surface) == 0:
        raise ValueError("empty surface")
    x = np.asarray(x, dtype=np.float64).reshape(1, 3)
    idx, _ = surface.query(x)
    p = surface.points[idx[0]].copy()
    return p, p - x[0], int(idx[0])


def chamfer_distance(a, b, tree_a: Optional[KdTree] = None, tree_b: Optional[KdTree] = None) -> float:
    """Sum of the two directed mean squared nearest-neighbour distances."""
    a = as_points(a, "A")
    b = as_points(b, "B")
    tree_a = tree_a or KdTree(a)
    tree_b = tree_b or KdTree(b)
    _, ab = tree_b.query(a)
    _, ba = tree_a.query(b)
    return float(ab.mean() + ba.mean())


# --------------------------------------------------------------------------- normalisation


@dataclass(frozen=True)
class Transform:
    """``normalized = (x - center) * scale``."""

    center: Tuple[float, float, float]
    scale: float

    def apply(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - np.asarray(self.center)) * self.scale

    def inverse(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) / self.scale + np.asarray(self.center)

    def to_json(self) -> dict:
        return {"center": list(self.center), "scale": self.scale}

    @classmethod
    def from_json(cls, d: dict) -> "Transform":
        return cls(tuple(float(c) for c in d["center"]), float(d["scale"]))


def normalize_unit_cube(cloud) -> Tuple[np.ndarray, Transform]:
    pts = as_points(cloud)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    half = float((hi - lo).max()) / 2.0
    if half <= 0.0:
        raise ValueError("degenerate cloud: all points identical")
    t = Transform(tuple(float(c) for c in (lo + hi) / 2.0), 1.0 / half)
    out = t.apply(pts)
    np.clip(out, -1.0, 1.0, out=out)
    return out, t


# --------------------------------------------------------------------------- meshes


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.triangles = np.asarray(self.triangles, dtype=np.int64)
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise ValueError(f"triangles must be (F, 3), got {self.triangles.shape}")
        bad = np.flatnonzero(((self.triangles < 0) | (self.triangles >= len(self.vertices))).any(axis=1))
        if len(bad):
            raise IndexError(f"triangle {int(bad[0])} has a vertex index out of range")

    def with_vertices(self, vertices) -> "TriangleMesh":
        verts = np.asarray(vertices, dtype=np.float64)
        if verts.shape != self.vertices.shape:
            raise ValueError(f"vertex array {verts.shape} does not match mesh {self.vertices.shape}")
        return TriangleMesh(verts, self.triangles)

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self._cross(), axis=1)

    def face_normals(self) -> np.ndarray:
        c = self._cross()
        n = np.linalg.norm(c, axis=1, keepdims=True)
        return c / np.where(n > 0, n, 1.0)

    def _cross(self) -> np.ndarray:
        v = self.vertices[self.triangles]
        return np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])


def loft_mesh(
    rings: np.ndarray, bottom_center: np.ndarray, top_center: np.ndarray
) -> TriangleMesh:
    """Close a stack of vertex rings into a genus-0 tube with fan caps.

    ``rings`` has shape ``(n_rings, n_around, 3)``; each ring is ordered
    counter-clockwise when viewed from the top so faces point outwards.
    """
    n_rings, n_around, _ = rings.shape
    if n_rings < 2 or n_around < 3:
        raise ValueError("need at least 2 rings of 3 vertices")
    verts = np.concatenate([rings.reshape(-1, 3), bottom_center[None], top_center[None]])
    bottom, top = n_rings * n_around, n_rings * n_around + 1
    j = np.arange(n_around)
    jn = (j + 1) % n_around
    tris = []
    for r in range(n_rings - 1):
        a, b = r * n_around + j, r * n_around + jn
        c, d = (r + 1) * n_around + j, (r + 1) * n_around + jn
        tris.append(np.stack([a, b, d], axis=1))
        tris.append(np.stack([a, d, c], axis=1))
    tris.append(np.stack([np.full(n_around, bottom), jn, j], axis=1))
    last = (n_rings - 1) * n_around
    tris.append(np.stack([np.full(n_around, top), last + j, last + jn], axis=1))
    return TriangleMesh(verts, np.concatenate(tris))


TEMPLATE_DEFAULTS = {"n_theta": 48, "n_z": 48, "radius": 0.25, "height": 1.8}


def template_cylinder(n_theta: int = 48, n_z: int = 48, radius: float = 0.25, height: float = 1.8) -> TriangleMesh:
    """Capped cylinder along z, centred on the origin: ``n_theta * (n_z + 1) + 2`` vertices."""
    if int(n_theta) != n_theta or n_theta < 3:
        raise ValueError(f"n_theta must be an integer >= 3, got {n_theta}")
    if int(n_z) != n_z or n_z < 1:
        raise ValueError(f"n_z must be an integer >= 1, got {n_z}")
    if not (radius > 0 and height > 0):
        raise ValueError("radius and height must be positive")
    theta = 2.0 * np.pi * np.arange(n_theta) / n_theta
    z = np.linspace(-height / 2.0, height / 2.0, n_z + 1)
    rings = np.empty((n_z + 1, n_theta, 3))
    rings[:, :, 0] = radius * np.cos(theta)[None]
    rings[:, :, 1] = radius * np.sin(theta)[None]
    rings[:, :, 2] = z[:, None]
    return loft_mesh(rings, np.array([0.0, 0.0, z[0]]), np.array([0.0, 0.0, z[-1]]))


@dataclass
class TopologyReport:
    vertices: int
    edges: int
    faces: int
    euler: int
    manifold: bool
    watertight: bool
    boundary_edges: List[Tuple[int, int]]

    def as_dict(self) -> dict:
        return {
            "V": self.vertices,
            "E": self.edges,
            "F": self.faces,
            "euler": self.euler,
            "manifold": self.manifold,
            "watertight": self.watertight,
            "boundary_edges": len(self.boundary_edges),
        }


def mesh_topology_check(mesh: TriangleMesh) -> TopologyReport:
    tris = np.asarray(mesh.triangles)
    n_v = len(mesh.vertices)
    for t, tri in enumerate(tris):
        if np.any((tri < 0) | (tri >= n_v)):
            raise IndexError(f"triangle {t} references a vertex outside [0, {n_v})")
    edges = np.sort(tris[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    counts = Counter(map(tuple, edges.tolist()))
    boundary = sorted(e for e, c in counts.items() if c == 1)
    manifold = all(c <= 2 for c in counts.values())
    watertight = all(c == 2 for c in counts.values())
    euler = n_v - len(counts) + len(tris)
    return TopologyReport(n_v, len(counts), len(tris), euler, manifold, watertight, boundary)


def sample_surface(mesh: TriangleMesh, count: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Area-weighted uniform samples: ``(points, face ids, barycentric weights)``."""
    areas = mesh.face_areas()
    faces = rng.choice(len(areas), size=count, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    bary = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)
    v = mesh.vertices[mesh.triangles[faces]]
    return np.einsum("ij,ijk->ik", bary, v), faces, bary


# --------------------------------------------------------------------------- IO


def write_obj(path, mesh: TriangleMesh) -> None:
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path) -> TriangleMesh:
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(t) for t in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(t.split("/")[0]) - 1 for t in parts[1:4]])
    return TriangleMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def write_ply(path, mesh: TriangleMesh) -> None:
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(mesh.vertices)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        f"element face {len(mesh.triangles)}\n"
        "property list uchar int vertex_indices\nend_header\n"
    )
    faces = np.zeros(len(mesh.triangles), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
    faces["n"] = 3
    faces["idx"] = mesh.triangles
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(np.ascontiguousarray(mesh.vertices, dtype="<f4").tobytes())
        f.write(faces.tobytes())


def read_ply(path) -> TriangleMesh:
    data = Path(path).read_bytes()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    header = data[:end].decode("ascii").splitlines()
    n_v = int(next(l for l in header if l.startswith("element vertex")).split()[-1])
    n_f = int(next(l for l in header if l.startswith("element face")).split()[-1])
    verts = np.frombuffer(data, dtype="<f4", count=3 * n_v, offset=end).reshape(n_v, 3)
    faces = np.frombuffer(data, dtype=[("n", "u1"), ("idx", "<i4", (3,))], count=n_f, offset=end + 12 * n_v)
    return TriangleMesh(verts.astype(np.float64), faces["idx"].astype(np.int64))


def write_point_cloud(path, points, frame: str = "unit_cube", source: str = "") -> None:
    """Raw little-endian float32 xyz triples plus a ``.json`` sidecar descriptor."""
    pts = np.ascontiguousarray(points, dtype="<f4")
    path = Path(path)
    path.write_bytes(pts.tobytes())
    sidecar = {"count": int(len(pts)), "frame": frame, "source": source}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, sort_keys=True))


def read_point_cloud(path, count: Optional[int] = None) -> np.ndarray:
    raw = np.frombuffer(Path(path).read_bytes(), dtype="<f4")
    pts = raw.reshape(-1, 3).astype(np.float64)
    if count is not None and len(pts) != count:
        raise ValueError(f"{path}: expected {count} points, found {len(pts)}")
    return pts
