"""Analytic test shapes: icosphere, box, cylinder.

These are the standard fixtures used throughout the test suite; each has a
closed-form signed distance so field and render behaviour can be checked
against exact oracles.
"""

from __future__ import annotations

import numpy as np

from .geometry import TriangleMesh


def make_icosphere(radius: float = 0.5, subdivisions: int = 4) -> TriangleMesh:
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)

    for _ in range(subdivisions):
        edge_mid: dict[tuple[int, int], int] = {}
        new_faces = []
        verts_list = list(verts)

        def midpoint(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            if key not in edge_mid:
                m = verts_list[a] + verts_list[b]
                m /= np.linalg.norm(m)
                edge_mid[key] = len(verts_list)
                verts_list.append(m)
            return edge_mid[key]

        for a, b, c in faces:
            ab = midpoint(a, b)
            bc = midpoint(b, c)
            ca = midpoint(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        verts = np.array(verts_list)
        faces = np.array(new_faces, dtype=np.int64)

    return TriangleMesh(verts * radius, faces)


def make_box(size=(0.8, 0.8, 0.8), subdivisions: int = 4) -> TriangleMesh:
    """Axis-aligned box centered at the origin, each face an n x n quad grid."""
    sx, sy, sz = (float(s) / 2.0 for s in np.broadcast_to(size, (3,)))
    n = max(1, subdivisions)
    verts: list[np.ndarray] = []
    faces: list[list[int]] = []

    def add_face(origin, du, dv):
        base = len(verts)
        for i in range(n + 1):
            for j in range(n + 1):
                verts.append(origin + du * (i / n) + dv * (j / n))
        for i in range(n):
            for j in range(n):
                a = base + i * (n + 1) + j
                b = a + (n + 1)
                faces.append([a, b, a + 1])
                faces.append([a + 1, b, b + 1])

    ex = np.array([2 * sx, 0.0, 0.0])
    ey = np.array([0.0, 2 * sy, 0.0])
    ez = np.array([0.0, 0.0, 2 * sz])
    add_face(np.array([-sx, -sy, sz]), ex, ey)   # +z
    add_face(np.array([-sx, sy, -sz]), ex, -ey)  # -z
    add_face(np.array([sx, -sy, -sz]), ey, ez)   # +x
    add_face(np.array([-sx, -sy, -sz]), ez, ey)  # -x
    add_face(np.array([-sx, sy, -sz]), ex, ez)   # +y
    add_face(np.array([-sx, -sy, -sz]), ex, ez)  # -y (reoriented below)
    mesh = TriangleMesh(np.array(verts), np.array(faces, dtype=np.int64))
    # orient all faces outward: flip faces whose normal disagrees with the
    # outward direction at the face centroid
    corners = mesh.face_corners()
    centroids = corners.mean(axis=1)
    normals = mesh.face_normals()
    half = np.array([sx, sy, sz])
    outward = np.zeros_like(centroids)
    ratios = np.abs(centroids) / half
    axis = np.argmax(ratios, axis=1)
    outward[np.arange(len(axis)), axis] = np.sign(centroids[np.arange(len(axis)), axis])
    flip = np.sum(normals * outward, axis=1) < 0
    f = mesh.faces.copy()
    f[flip] = f[flip][:, [0, 2, 1]]
    return TriangleMesh(mesh.vertices, f)


def make_cylinder(radius: float = 0.3, height: float = 0.8,
                  radial_segments: int = 96, height_segments: int = 8) -> TriangleMesh:
    """Closed cylinder along z, centered at the origin."""
    hs = height / 2.0
    verts: list[list[float]] = []
    faces: list[list[int]] = []
    ang = 2 * np.pi * np.arange(radial_segments) / radial_segments
    ring = np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)
    for k in range(height_segments + 1):
        z = -hs + height * k / height_segments
        for x, y in ring:
            verts.append([x, y, z])
    for k in range(height_segments):
        for i in range(radial_segments):
            a = k * radial_segments + i
            b = k * radial_segments + (i + 1) % radial_segments
            c = a + radial_segments
            d = b + radial_segments
            faces.append([a, b, c])
            faces.append([b, d, c])
    top_center = len(verts)
    verts.append([0.0, 0.0, hs])
    bottom_center = len(verts)
    verts.append([0.0, 0.0, -hs])
    top0 = height_segments * radial_segments
    for i in range(radial_segments):
        a = top0 + i
        b = top0 + (i + 1) % radial_segments
        faces.append([a, b, top_center])
        faces.append([(i + 1) % radial_segments, i, bottom_center])
    return TriangleMesh(np.array(verts), np.array(faces, dtype=np.int64))


def sphere_sdf(points: np.ndarray, radius: float = 0.5) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    return np.linalg.norm(p, axis=-1) - radius


def box_sdf(points: np.ndarray, size=(0.8, 0.8, 0.8)) -> np.ndarray:
    half = np.asarray(size, dtype=np.float64) / 2.0
    q = np.abs(np.asarray(points, dtype=np.float64)) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(q.max(axis=-1), 0.0)
    return outside + inside


def cylinder_sdf(points: np.ndarray, radius: float = 0.3, height: float = 0.8) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    dr = np.linalg.norm(p[..., :2], axis=-1) - radius
    dz = np.abs(p[..., 2]) - height / 2.0
    q = np.stack([dr, dz], axis=-1)
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(np.maximum(dr, dz), 0.0)
    return outside + inside
