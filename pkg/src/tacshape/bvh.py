"""Accelerated first-hit ray casting against triangle meshes.

The structure is a median-split bounding-volume hierarchy flattened into
arrays so the traversal can run inside a numba kernel. It is immutable after
construction and safe for concurrent read-only queries; results are identical
to exhaustive per-triangle testing (same intersection routine, nearest-t with
lowest-face-index tie-breaking).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .geometry import MeshError, Ray, TriangleMesh

_LEAF_SIZE = 4


def _morton_codes(points: np.ndarray) -> np.ndarray:
    """30-bit Morton codes of points quantized to a 1024^3 grid."""
    lo = points.min(axis=0)
    extent = points.max(axis=0) - lo
    extent[extent <= 0] = 1.0
    q = np.minimum((points - lo) / extent * 1024.0, 1023.0).astype(np.uint64)

    def spread(x):
        x = (x | (x << 32)) & np.uint64(0x1F00000000FFFF)
        x = (x | (x << 16)) & np.uint64(0x1F0000FF0000FF)
        x = (x | (x << 8)) & np.uint64(0x100F00F00F00F00F)
        x = (x | (x << 4)) & np.uint64(0x10C30C30C30C30C3)
        x = (x | (x << 2)) & np.uint64(0x1249249249249249)
        return x

    return (spread(q[:, 0]) | (spread(q[:, 1]) << np.uint64(1))
            | (spread(q[:, 2]) << np.uint64(2)))


@dataclass(frozen=True)
class Hit:
    t: float
    point: np.ndarray
    normal: np.ndarray
    face: int


class RayCaster:
    """First-hit queries against a fixed mesh."""

    def __init__(self, mesh: TriangleMesh):
        if mesh.n_faces == 0:
            raise MeshError("cannot build a ray caster for an empty mesh")
        self.mesh = mesh
        corners = mesh.face_corners()
        self._v0 = np.ascontiguousarray(corners[:, 0])
        self._v1 = np.ascontiguousarray(corners[:, 1])
        self._v2 = np.ascontiguousarray(corners[:, 2])
        self._face_normals = mesh.face_normals()
        self._build()

    def _build(self) -> None:
        """Morton-ordered implicit tree: primitives are sorted along a space-
        filling curve once, leaves take consecutive chunks, and internal
        bounding boxes reduce bottom-up. No per-node Python work."""
        n = self.mesh.n_faces
        lo = np.minimum(np.minimum(self._v0, self._v1), self._v2)
        hi = np.maximum(np.maximum(self._v0, self._v1), self._v2)
        centroids = (self._v0 + self._v1 + self._v2) / 3.0
        order = np.argsort(_morton_codes(centroids), kind="stable").astype(np.int64)

        n_leaves = max(1, (n + _LEAF_SIZE - 1) // _LEAF_SIZE)
        n_pad = 1 << int(np.ceil(np.log2(n_leaves)))
        n_nodes = 2 * n_pad - 1
        node_lo = np.full((n_nodes, 3), np.inf)
        node_hi = np.full((n_nodes, 3), -np.inf)
        node_left = np.full(n_nodes, -1, dtype=np.int64)
        node_right = np.full(n_nodes, -1, dtype=np.int64)
        node_start = np.zeros(n_nodes, dtype=np.int64)
        node_count = np.zeros(n_nodes, dtype=np.int64)

        # leaf bounds over padded chunks of the ordered primitives
        pad_n = n_pad * _LEAF_SIZE
        lo_ord = np.full((pad_n, 3), np.inf)
        hi_ord = np.full((pad_n, 3), -np.inf)
        lo_ord[:n] = lo[order]
        hi_ord[:n] = hi[order]
        leaf_lo = lo_ord.reshape(n_pad, _LEAF_SIZE, 3).min(axis=1)
        leaf_hi = hi_ord.reshape(n_pad, _LEAF_SIZE, 3).max(axis=1)

        first_leaf = n_pad - 1
        node_lo[first_leaf:] = leaf_lo
        node_hi[first_leaf:] = leaf_hi
        starts = np.arange(n_pad, dtype=np.int64) * _LEAF_SIZE
        node_start[first_leaf:] = np.minimum(starts, n)
        node_count[first_leaf:] = np.clip(n - starts, 0, _LEAF_SIZE)

        # internal levels bottom-up (heap layout: children of i are 2i+1, 2i+2)
        level_start = first_leaf
        while level_start > 0:
            parent_start = (level_start - 1) // 2
            parents = np.arange(parent_start, level_start)
            node_left[parents] = 2 * parents + 1
            node_right[parents] = 2 * parents + 2
            node_lo[parents] = np.minimum(node_lo[2 * parents + 1],
                                          node_lo[2 * parents + 2])
            node_hi[parents] = np.maximum(node_hi[2 * parents + 1],
                                          node_hi[2 * parents + 2])
            level_start = parent_start

        # empty padded leaves keep count 0; give them a harmless point bbox
        empty = node_count == 0
        empty[:first_leaf] = False
        node_lo[empty] = 0.0
        node_hi[empty] = 0.0

        self._node_lo = node_lo
        self._node_hi = node_hi
        self._node_left = node_left
        self._node_right = node_right
        self._node_start = node_start
        self._node_count = node_count
        self._prim_order = order
        self.n_nodes = n_nodes

    def cast_batch(self, origins: np.ndarray, directions: np.ndarray,
                   t_min=0.0, t_max=np.inf) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized first-hit query.

        Returns (t, face): t = inf and face = -1 where the ray misses.
        """
        origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
        directions = np.ascontiguousarray(directions, dtype=np.float64).reshape(-1, 3)
        n = len(origins)
        t_min = np.broadcast_to(np.asarray(t_min, dtype=np.float64), (n,)).copy()
        t_max = np.broadcast_to(np.asarray(t_max, dtype=np.float64), (n,)).copy()
        out_t = np.empty(n)
        out_face = np.empty(n, dtype=np.int64)
        kernels.bvh_cast(self._node_lo, self._node_hi, self._node_left,
                         self._node_right, self._node_start, self._node_count,
                         self._prim_order, self._v0, self._v1, self._v2,
                         origins, directions, t_min, t_max, out_t, out_face)
        return out_t, out_face

    def hit_normals(self, faces: np.ndarray, directions: np.ndarray) -> np.ndarray:
        """Geometric face normals oriented against the ray directions."""
        n = self._face_normals[faces]
        flip = np.sum(n * directions, axis=-1) > 0.0
        n = n.copy()
        n[flip] = -n[flip]
        return n


def build_ray_caster(mesh: TriangleMesh) -> RayCaster:
    return RayCaster(mesh)


def cast_ray(caster: RayCaster, ray: Ray) -> Hit | None:
    """Nearest intersection within [t_min, t_max], or None."""
    t, face = caster.cast_batch(ray.origin[None], ray.direction[None],
                                ray.t_min, ray.t_max)
    if face[0] < 0:
        return None
    normal = caster.hit_normals(face, ray.direction[None])[0]
    return Hit(t=float(t[0]), point=ray.point_at(float(t[0])),
               normal=normal, face=int(face[0]))


def brute_force_cast_batch(mesh: TriangleMesh, origins, directions,
                           t_min=0.0, t_max=np.inf) -> tuple[np.ndarray, np.ndarray]:
    """Exhaustive reference used as the correctness oracle for the BVH."""
    corners = mesh.face_corners()
    origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    directions = np.ascontiguousarray(directions, dtype=np.float64).reshape(-1, 3)
    n = len(origins)
    t_min = np.broadcast_to(np.asarray(t_min, dtype=np.float64), (n,)).copy()
    t_max = np.broadcast_to(np.asarray(t_max, dtype=np.float64), (n,)).copy()
    out_t = np.empty(n)
    out_face = np.empty(n, dtype=np.int64)
    kernels.brute_force_cast(np.ascontiguousarray(corners[:, 0]),
                             np.ascontiguousarray(corners[:, 1]),
                             np.ascontiguousarray(corners[:, 2]),
                             origins, directions, t_min, t_max, out_t, out_face)
    return out_t, out_face
