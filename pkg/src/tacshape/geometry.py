"""Triangle meshes, rigid poses, rays, and mesh file I/O.

Meshes are plain vertex/face arrays in float64. Degenerate (zero-area) faces
are dropped at load time with a warning; vertex normals are area-weighted face
normal averages. World/domain convention: objects are normalized so that the
longest bounding-box axis fits [-0.9, 0.9].
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

DOMAIN_HALFEXTENT = 0.9
_DEGENERATE_AREA_EPS = 1e-14


class MeshError(ValueError):
    """Raised for unusable mesh input (empty, malformed, bad indices)."""


@dataclass(frozen=True)
class Pose:
    """Rigid transform: world_point = rotation @ local_point + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        err = np.abs(R @ R.T - np.eye(3)).max()
        if err > 1e-9:
            raise ValueError(f"rotation is not orthonormal (|RR^T - I| = {err:.3e})")
        if np.linalg.det(R) < 0.0:
            raise ValueError("rotation has negative determinant (reflection)")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform local points (N,3) or (3,) to world."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def apply_vector(self, vectors: np.ndarray) -> np.ndarray:
        """Rotate direction vectors (no translation)."""
        return np.asarray(vectors, dtype=np.float64) @ self.rotation.T

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """self ∘ other: apply `other` first, then `self`."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_min: float = 0.0
    t_max: float = np.inf

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        n = np.linalg.norm(d)
        if abs(n - 1.0) > 1e-9:
            raise ValueError(f"ray direction is not unit length (|d| = {n!r})")
        if not self.t_min < self.t_max:
            raise ValueError("ray requires t_min < t_max")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    def point_at(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        return self.origin + t[..., None] * self.direction if t.ndim else self.origin + t * self.direction


@dataclass
class TriangleMesh:
    """Indexed triangle mesh with derived per-vertex unit normals.

    Faces are CCW when viewed from outside. Construction drops zero-area
    faces and unreferenced vertices; `vertex_normals` is recomputed after
    any cleanup.
    """

    vertices: np.ndarray
    faces: np.ndarray
    vertex_normals: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3))
        f = np.ascontiguousarray(np.asarray(self.faces, dtype=np.int64).reshape(-1, 3))
        if len(v) == 0 or len(f) == 0:
            raise MeshError("mesh is empty")
        if f.min() < 0 or f.max() >= len(v):
            raise MeshError(f"face index out of range (max {f.max()}, {len(v)} vertices)")
        areas = _face_areas(v, f)
        bad = areas <= _DEGENERATE_AREA_EPS
        if bad.any():
            log.warning("dropping %d degenerate faces", int(bad.sum()))
            f = f[~bad]
            if len(f) == 0:
                raise MeshError("all faces degenerate")
        used = np.zeros(len(v), dtype=bool)
        used[f.ravel()] = True
        if not used.all():
            remap = np.cumsum(used) - 1
            v = v[used]
            f = remap[f]
        self.vertices = v
        self.faces = np.ascontiguousarray(f)
        self.vertex_normals = _vertex_normals(v, self.faces)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def face_corners(self) -> np.ndarray:
        """(F, 3, 3) corner positions."""
        return self.vertices[self.faces]

    def face_normals(self, normalized: bool = True) -> np.ndarray:
        a, b, c = (self.face_corners()[:, i, :] for i in range(3))
        n = np.cross(b - a, c - a)
        if normalized:
            n = n / np.linalg.norm(n, axis=1, keepdims=True)
        return n

    def face_areas(self) -> np.ndarray:
        return _face_areas(self.vertices, self.faces)

    def surface_area(self) -> float:
        return float(self.face_areas().sum())

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def edges(self) -> np.ndarray:
        """Unique undirected edges (E, 2) with e[:,0] < e[:,1]."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=0)
        e = np.sort(e, axis=1)
        return np.unique(e, axis=0)

    def translated(self, offset) -> "TriangleMesh":
        return TriangleMesh(self.vertices + np.asarray(offset, dtype=np.float64), self.faces.copy())


def _face_areas(v: np.ndarray, f: np.ndarray) -> np.ndarray:
    a = v[f[:, 0]]
    n = np.cross(v[f[:, 1]] - a, v[f[:, 2]] - a)
    return 0.5 * np.linalg.norm(n, axis=1)


def _vertex_normals(v: np.ndarray, f: np.ndarray) -> np.ndarray:
    # Area weighting comes free from the unnormalized cross products.
    a = v[f[:, 0]]
    fn = np.cross(v[f[:, 1]] - a, v[f[:, 2]] - a)
    vn = np.zeros_like(v)
    for k in range(3):
        np.add.at(vn, f[:, k], fn)
    norms = np.linalg.norm(vn, axis=1, keepdims=True)
    norms[norms < 1e-300] = 1.0
    return vn / norms


@dataclass(frozen=True)
class NormalizationRecord:
    """Similarity transform applied at load: world = (obj - center) * scale."""

    scale: float
    center: np.ndarray

    def to_dict(self) -> dict:
        return {"scale": self.scale, "center": self.center.tolist()}


def normalize_mesh(mesh: TriangleMesh,
                   halfextent: float = DOMAIN_HALFEXTENT) -> tuple[TriangleMesh, NormalizationRecord]:
    """Scale/translate so the longest bbox axis spans [-halfextent, halfextent]."""
    lo, hi = mesh.bounds()
    center = 0.5 * (lo + hi)
    extent = float((hi - lo).max())
    if extent <= 0.0:
        raise MeshError("mesh has zero extent")
    scale = 2.0 * halfextent / extent
    out = TriangleMesh((mesh.vertices - center) * scale, mesh.faces.copy())
    return out, NormalizationRecord(scale=scale, center=center)


# ---------------------------------------------------------------------------
# File formats: OBJ and binary little-endian PLY.
# ---------------------------------------------------------------------------

def load_mesh(path, normalize: bool = False):
    """Load an OBJ or binary PLY mesh.

    Returns the mesh, or (mesh, NormalizationRecord) when normalize=True.
    """
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        mesh = _read_obj(path)
    elif suffix == ".ply":
        mesh = _read_ply_mesh(path)
    else:
        raise MeshError(f"unsupported mesh format: {path.name}")
    if normalize:
        return normalize_mesh(mesh)
    return mesh


def save_mesh(mesh: TriangleMesh, path) -> None:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        _write_obj(mesh, path)
    elif suffix == ".ply":
        _write_ply_mesh(mesh, path)
    else:
        raise MeshError(f"unsupported mesh format: {path.name}")


def _read_obj(path: Path) -> TriangleMesh:
    verts: list[tuple[float, float, float]] = []
    faces: list[tuple[int, int, int]] = []
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        for line in fh:
            if line.startswith("v "):
                parts = line.split()
                verts.append((float(parts[1]), float(parts[2]), float(parts[3])))
            elif line.startswith("f "):
                idx = []
                for token in line.split()[1:]:
                    i = int(token.split("/")[0])
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                # fan-triangulate polygons
                for k in range(1, len(idx) - 1):
                    faces.append((idx[0], idx[k], idx[k + 1]))
    if not verts or not faces:
        raise MeshError(f"no geometry in {path}")
    return TriangleMesh(np.array(verts), np.array(faces))


def _write_obj(mesh: TriangleMesh, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for f in mesh.faces + 1:
            fh.write(f"f {f[0]} {f[1]} {f[2]}\n")


_PLY_DTYPES = {
    "char": "i1", "uchar": "u1", "int8": "i1", "uint8": "u1",
    "short": "i2", "ushort": "u2", "int16": "i2", "uint16": "u2",
    "int": "i4", "uint": "u4", "int32": "i4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _read_ply_header(fh):
    if fh.readline().strip() != b"ply":
        raise MeshError("not a PLY file")
    fmt = None
    elements = []  # (name, count, [(prop_name, dtype) or ('list', count_dt, item_dt, name)])
    while True:
        line = fh.readline()
        if not line:
            raise MeshError("truncated PLY header")
        tokens = line.decode("ascii", errors="replace").split()
        if not tokens:
            continue
        if tokens[0] == "format":
            fmt = tokens[1]
        elif tokens[0] == "element":
            elements.append((tokens[1], int(tokens[2]), []))
        elif tokens[0] == "property":
            if tokens[1] == "list":
                elements[-1][2].append(("list", _PLY_DTYPES[tokens[2]], _PLY_DTYPES[tokens[3]], tokens[4]))
            else:
                elements[-1][2].append((tokens[2], _PLY_DTYPES[tokens[1]]))
        elif tokens[0] == "end_header":
            break
    if fmt != "binary_little_endian":
        raise MeshError(f"only binary little-endian PLY is supported (got {fmt})")
    return elements


def _read_ply_mesh(path: Path) -> TriangleMesh:
    with open(path, "rb") as fh:
        elements = _read_ply_header(fh)
        verts = None
        faces = None
        for name, count, props in elements:
            if name == "vertex":
                names = [p[0] for p in props]
                dtype = np.dtype([(p[0], "<" + p[1]) for p in props])
                data = np.frombuffer(fh.read(dtype.itemsize * count), dtype=dtype)
                verts = np.stack([data[c].astype(np.float64) for c in ("x", "y", "z")], axis=1)
                del names
            elif name == "face":
                spec = props[0]
                if spec[0] != "list":
                    raise MeshError("face element must be a list property")
                cdt = np.dtype("<" + spec[1])
                idt = np.dtype("<" + spec[2])
                out = []
                for _ in range(count):
                    n = int(np.frombuffer(fh.read(cdt.itemsize), dtype=cdt)[0])
                    idx = np.frombuffer(fh.read(idt.itemsize * n), dtype=idt).astype(np.int64)
                    for k in range(1, n - 1):
                        out.append((idx[0], idx[k], idx[k + 1]))
                faces = np.array(out, dtype=np.int64)
            else:
                # skip unknown fixed-size elements
                dtype = np.dtype([(p[0], "<" + p[1]) for p in props])
                fh.read(dtype.itemsize * count)
    if verts is None or faces is None:
        raise MeshError(f"PLY without vertex+face elements: {path}")
    return TriangleMesh(verts, faces)


def _write_ply_mesh(mesh: TriangleMesh, path: Path) -> None:
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {mesh.n_vertices}\n"
        "property double x\nproperty double y\nproperty double z\n"
        f"element face {mesh.n_faces}\n"
        "property list uchar int vertex_indices\n"
        "end_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(mesh.vertices.astype("<f8").tobytes())
        f = mesh.faces.astype("<i4")
        rec = np.empty(mesh.n_faces, dtype=[("n", "u1"), ("idx", "<i4", (3,))])
        rec["n"] = 3
        rec["idx"] = f
        fh.write(rec.tobytes())


def save_point_cloud(points: np.ndarray, path) -> None:
    """Write an Nx3 point cloud as binary little-endian PLY."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(points)}\n"
        "property double x\nproperty double y\nproperty double z\n"
        "end_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(points.astype("<f8").tobytes())


def load_point_cloud(path) -> np.ndarray:
    with open(path, "rb") as fh:
        elements = _read_ply_header(fh)
        for name, count, props in elements:
            dtype = np.dtype([(p[0], "<" + p[1]) for p in props])
            data = np.frombuffer(fh.read(dtype.itemsize * count), dtype=dtype)
            if name == "vertex":
                return np.stack([data[c].astype(np.float64) for c in ("x", "y", "z")], axis=1)
    raise MeshError(f"PLY without vertex element: {path}")
