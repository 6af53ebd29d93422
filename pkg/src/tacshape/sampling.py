"""Surface sampling: area-uniform point draws and Poisson-disk selection.

Poisson-disk rejection uses Euclidean distance (dart throwing on an
area-uniform candidate stream), which is the standard cheap choice for
selecting well-separated contact sites on a mesh.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import MeshError, TriangleMesh


@dataclass(frozen=True)
class SurfacePoint:
    position: np.ndarray
    normal: np.ndarray
    face: int


@dataclass
class PoissonDiskResult:
    points: list[SurfacePoint]
    requested: int
    exhausted: bool  # true when the candidate pool ran out before `requested`

    def __len__(self) -> int:
        return len(self.points)

    def positions(self) -> np.ndarray:
        return np.array([p.position for p in self.points]).reshape(-1, 3)

    def normals(self) -> np.ndarray:
        return np.array([p.normal for p in self.points]).reshape(-1, 3)


def sample_surface_points(mesh: TriangleMesh, n: int, seed: int,
                          return_info: bool = False):
    """Draw n points area-uniformly on the mesh surface.

    Deterministic per seed. With return_info=True also returns the face index
    and barycentric coordinates of every point.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if mesh.n_faces == 0:
        raise MeshError("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    areas = mesh.face_areas()
    probs = areas / areas.sum()
    face_idx = rng.choice(mesh.n_faces, size=n, p=probs)
    uv = rng.random((n, 2))
    flip = uv.sum(axis=1) > 1.0
    uv[flip] = 1.0 - uv[flip]
    corners = mesh.face_corners()[face_idx]
    pts = (corners[:, 0]
           + uv[:, :1] * (corners[:, 1] - corners[:, 0])
           + uv[:, 1:] * (corners[:, 2] - corners[:, 0]))
    if return_info:
        bary = np.stack([1.0 - uv[:, 0] - uv[:, 1], uv[:, 0], uv[:, 1]], axis=1)
        return pts, face_idx, bary
    return pts


def poisson_disk_sample(mesh: TriangleMesh, min_dist: float,
                        count: int, oversample_factor: float = 4.0,
                        seed: int = 0) -> PoissonDiskResult:
    """Select up to oversample_factor*count surface points pairwise >= min_dist apart.

    Dart throwing over an area-uniform candidate stream: candidates closer
    than min_dist to an accepted point are rejected. If the pool of
    candidates is exhausted first, the result is flagged.
    """
    if min_dist <= 0.0:
        raise ValueError("min_dist must be positive")
    target = max(1, int(round(oversample_factor * count)))
    # enough candidates to saturate the surface at the requested radius
    n_candidates = max(64, 30 * target)
    pts, faces, _ = sample_surface_points(mesh, n_candidates, seed, return_info=True)
    face_normals = mesh.face_normals()

    accepted: list[int] = []
    accepted_pts: list[np.ndarray] = []
    tree = None
    rebuild_every = 64
    for i in range(n_candidates):
        p = pts[i]
        ok = True
        if accepted_pts:
            if tree is not None:
                if tree.query_ball_point(p, min_dist):
                    ok = False
            if ok:
                recent = accepted_pts[(len(accepted_pts) // rebuild_every) * rebuild_every:]
                if recent:
                    d = np.linalg.norm(np.asarray(recent) - p, axis=1)
                    if (d < min_dist).any():
                        ok = False
        if ok:
            accepted.append(i)
            accepted_pts.append(p)
            if len(accepted_pts) % rebuild_every == 0:
                tree = cKDTree(np.asarray(accepted_pts))
            if len(accepted) >= target:
                break
    points = [SurfacePoint(position=pts[i], normal=face_normals[faces[i]],
                           face=int(faces[i])) for i in accepted]
    return PoissonDiskResult(points=points, requested=target,
                             exhausted=len(points) < target)


def default_poisson_radius(mesh: TriangleMesh, count: int,
                           oversample_factor: float = 4.0) -> float:
    """Disk radius so ~oversample_factor*count non-overlapping disks tile the area."""
    n = max(1, int(round(oversample_factor * count)))
    # hexagonal packing covers ~0.9 of the plane; be a little conservative
    return float(np.sqrt(mesh.surface_area() / (n * np.pi * 1.3)))
