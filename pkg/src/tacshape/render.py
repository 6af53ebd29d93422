"""Differentiable rendering.

Stage 1 renders the grid SDF by fixed-step ray marching (512 samples, secant
refinement at the first sign change). Depth gradients use the implicit
function relation dt/dtheta = -(df/dtheta)/(df/dt) at the crossing; normal
gradients chain through the spatial gradient, including the motion term along
the ray (Hessian times direction).

Stage 2 renders the extracted triangle mesh per pixel (interpolated vertex
normals) with closed-form gradients back to vertex positions. Silhouette
(visibility) gradients are not modeled.

Normal images are expressed in the viewing frame: x right, y up, z along the
view direction, so a surface facing the camera reads (0, 0, -1) and the
background constant is (0, 0, +1).
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import kernels
from .bvh import RayCaster
from .field import GridSDF
from .geometry import Pose, TriangleMesh

BACKGROUND_NORMAL = np.array([0.0, 0.0, 1.0])
_MARCH_SAMPLES_DEFAULT = 512
_DEGENERATE_DIRECTIONAL_EPS = 1e-8


@dataclass(frozen=True)
class ViewCamera:
    """Perspective camera on a sphere around the origin, looking at the origin
    along its -z axis."""

    pose: Pose
    fov_deg: float = 45.0
    width: int = 64
    height: int = 64

    def __post_init__(self):
        fwd = -self.pose.rotation[:, 2]
        to_origin = -self.pose.translation
        norm = np.linalg.norm(to_origin)
        if norm > 0 and np.linalg.norm(fwd - to_origin / norm) > 1e-6:
            raise ValueError("camera -z axis must point at the origin")

    def rays(self) -> tuple[np.ndarray, np.ndarray]:
        """World-space (origins, directions) for all pixels, row-major."""
        w, h = self.width, self.height
        tan_half = np.tan(np.radians(self.fov_deg) / 2.0)
        aspect = w / h
        xs = (np.arange(w) + 0.5) / w * 2.0 - 1.0
        ys = 1.0 - (np.arange(h) + 0.5) / h * 2.0
        px, py = np.meshgrid(xs * tan_half * aspect, ys * tan_half)
        dirs_cam = np.stack([px, py, -np.ones_like(px)], axis=-1).reshape(-1, 3)
        dirs_cam /= np.linalg.norm(dirs_cam, axis=1, keepdims=True)
        dirs = dirs_cam @ self.pose.rotation.T
        origins = np.broadcast_to(self.pose.translation, dirs.shape).copy()
        return origins, dirs

    def view_matrix(self) -> np.ndarray:
        """World->image-frame rotation (rows: x_cam, y_cam, view direction)."""
        R = self.pose.rotation
        return np.stack([R[:, 0], R[:, 1], -R[:, 2]], axis=0)


def look_at_pose(position: np.ndarray, up_hint=(0.0, 0.0, 1.0)) -> Pose:
    """Pose at `position` with -z toward the origin and the up hint projected."""
    position = np.asarray(position, dtype=np.float64)
    z = position / np.linalg.norm(position)  # -z points at origin
    up = np.asarray(up_hint, dtype=np.float64)
    x = np.cross(up, z)
    if np.linalg.norm(x) < 1e-8:
        x = np.cross(np.array([1.0, 0.0, 0.0]), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose(np.stack([x, y, z], axis=1), position)


def sample_view(rng: np.random.Generator, count: int, radius: float = 2.2,
                fov_deg: float = 45.0, width: int = 64, height: int = 64) -> list[ViewCamera]:
    """Uniform camera directions on the sphere, up-vector gauge fixed."""
    if count < 1:
        raise ValueError("count must be >= 1")
    cams = []
    for _ in range(count):
        v = rng.normal(size=3)
        n = np.linalg.norm(v)
        while n < 1e-12:
            v = rng.normal(size=3)
            n = np.linalg.norm(v)
        pos = v / n * radius
        cams.append(ViewCamera(pose=look_at_pose(pos), fov_deg=fov_deg,
                               width=width, height=height))
    return cams


def _clip_to_cube(origins: np.ndarray, dirs: np.ndarray,
                  t_min, t_max) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Intersect rays with [-1,1]^3; returns (t0, t1, valid)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(dirs != 0.0, 1.0 / dirs, np.inf)
        lo = (-1.0 - origins) * inv
        hi = (1.0 - origins) * inv
    t_lo = np.where(dirs != 0.0, np.minimum(lo, hi), -np.inf)
    t_hi = np.where(dirs != 0.0, np.maximum(lo, hi), np.inf)
    inside = (np.abs(origins) <= 1.0) | (dirs != 0.0)
    t0 = np.maximum(t_lo.max(axis=1), np.broadcast_to(t_min, t_lo.shape[:1]))
    t1 = np.minimum(t_hi.min(axis=1), np.broadcast_to(t_max, t_hi.shape[:1]))
    valid = (t0 < t1) & inside.all(axis=1)
    valid &= (np.abs(origins + t0[:, None] * dirs) <= 1.0 + 1e-9).all(axis=1)
    return t0, t1, valid


@dataclass
class RayRenderResult:
    """Per-ray outputs of the field renderer plus backward bookkeeping."""

    hit: np.ndarray          # (N,) bool
    depth: np.ndarray        # (N,) world units; undefined where miss
    normal: np.ndarray       # (N,3) world frame; undefined where miss
    degenerate: np.ndarray   # (N,) bool, hit but |df/dt| ~ 0 (excluded from losses)
    points: np.ndarray       # (N,3) crossing points
    grad: np.ndarray         # (N,3) field spatial gradient at the crossing
    origins: np.ndarray
    dirs: np.ndarray
    min_f: np.ndarray = dc_field(default=None)    # closest-approach value per ray
    t_min_f: np.ndarray = dc_field(default=None)  # depth of the closest approach

    def usable(self) -> np.ndarray:
        return self.hit & ~self.degenerate

    def backward(self, fieldsdf: GridSDF, grads: list[np.ndarray],
                 d_depth: np.ndarray | None = None,
                 d_normal: np.ndarray | None = None) -> None:
        """Accumulate parameter gradients for the usable rays.

        d_depth (N,) and d_normal (N,3) are upstream derivatives; entries for
        missed/degenerate rays are ignored.
        """
        use = self.usable()
        if not use.any():
            return
        pts = self.points[use]
        dirs = self.dirs[use]
        g = self.grad[use]
        denom = np.sum(g * dirs, axis=1)
        dldt = np.zeros(len(pts))
        if d_depth is not None:
            dldt += np.asarray(d_depth, dtype=np.float64)[use]
        dldg = None
        if d_normal is not None:
            dn = np.asarray(d_normal, dtype=np.float64)[use]
            gn = np.linalg.norm(g, axis=1)
            n = g / gn[:, None]
            dldg = (dn - n * np.sum(n * dn, axis=1)[:, None]) / gn[:, None]
            H = fieldsdf.hessian(pts)
            hdir = np.einsum("nij,nj->ni", H, dirs)
            dldt += np.sum(dldg * hdir, axis=1)
        # dt/dtheta = -w/denom  -> value-weight scatter
        fieldsdf.scatter_value_grad(grads, pts, -dldt / denom)
        if dldg is not None:
            fieldsdf.scatter_spatial_grad(grads, pts, dldg)


def render_rays(fieldsdf: GridSDF, origins: np.ndarray, dirs: np.ndarray,
                t_min=0.0, t_max=np.inf,
                n_samples: int = _MARCH_SAMPLES_DEFAULT) -> RayRenderResult:
    """March every ray with n_samples fixed steps; secant-refine the first
    sign change. Rays that never change sign are misses."""
    origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = len(origins)
    t0, t1, valid = _clip_to_cube(origins, dirs, t_min, t_max)

    hit = np.zeros(n, dtype=bool)
    bracket_lo = np.zeros(n)
    bracket_hi = np.zeros(n)
    f_lo = np.zeros(n)
    f_hi = np.zeros(n)
    min_f = np.zeros(n)
    t_min_f = np.zeros(n)

    stack, res_arr = fieldsdf.level_stack()
    kernels.march_rays(stack, res_arr, fieldsdf.active_levels, origins, dirs,
                       t0, np.where(valid, t1, t0 + 1.0), valid,
                       max(2, n_samples), hit, bracket_lo, bracket_hi, f_lo, f_hi,
                       min_f, t_min_f)

    depth = np.zeros(n)
    points = origins.copy()
    g = np.zeros((n, 3))
    if hit.any():
        kernels.refine_crossings(stack, res_arr, fieldsdf.active_levels,
                                 origins, dirs, hit, bracket_lo, bracket_hi,
                                 f_lo, f_hi, 1e-12, 40, depth)
        points[hit] = origins[hit] + depth[hit, None] * dirs[hit]
        g[hit] = fieldsdf.eval(points[hit]).spatial_grad
    denom = np.sum(g * dirs, axis=1)
    degenerate = hit & (np.abs(denom) < _DEGENERATE_DIRECTIONAL_EPS)
    gn = np.linalg.norm(g, axis=1)
    safe = np.where(gn > 1e-300, gn, 1.0)
    normal = g / safe[:, None]
    return RayRenderResult(hit=hit, depth=depth, normal=normal, degenerate=degenerate,
                           points=points, grad=g, origins=origins, dirs=dirs,
                           min_f=min_f, t_min_f=t_min_f)


def render_ray(fieldsdf: GridSDF, ray) -> dict:
    """Single-ray contract: {'d': float, 'n': (3,), 'hit': bool}."""
    res = render_rays(fieldsdf, ray.origin[None], ray.direction[None],
                      t_min=ray.t_min, t_max=ray.t_max)
    return {"d": float(res.depth[0]), "n": res.normal[0], "hit": bool(res.hit[0]),
            "degenerate": bool(res.degenerate[0])}


@dataclass
class NormalImage:
    """H x W x 3 viewing-frame normals, background (0,0,1), plus hit mask."""

    normals: np.ndarray
    hit: np.ndarray
    camera: ViewCamera
    _ray_result: RayRenderResult | None = dc_field(default=None, repr=False)
    _mesh_render: "MeshRenderResult | None" = dc_field(default=None, repr=False)

    @property
    def height(self) -> int:
        return self.normals.shape[0]

    @property
    def width(self) -> int:
        return self.normals.shape[1]


def render_normal_image(fieldsdf: GridSDF, cam: ViewCamera,
                        n_samples: int = _MARCH_SAMPLES_DEFAULT) -> NormalImage:
    origins, dirs = cam.rays()
    res = render_rays(fieldsdf, origins, dirs, n_samples=n_samples)
    M = cam.view_matrix()
    img = np.tile(BACKGROUND_NORMAL, (cam.height * cam.width, 1))
    use = res.usable()
    img[use] = res.normal[use] @ M.T
    return NormalImage(normals=img.reshape(cam.height, cam.width, 3),
                       hit=use.reshape(cam.height, cam.width).copy(),
                       camera=cam, _ray_result=res)


def normal_image_backward(image: NormalImage, fieldsdf: GridSDF,
                          grads: list[np.ndarray], d_image: np.ndarray) -> None:
    """Chain an image-space gradient (H,W,3) into field parameter gradients.

    Gradient flows only through hit pixels; the background is constant.
    """
    res = image._ray_result
    if res is None:
        raise ValueError("normal image was not rendered from a field")
    M = image.camera.view_matrix()
    d_flat = np.asarray(d_image, dtype=np.float64).reshape(-1, 3)
    d_world = d_flat @ M  # (M n)^T pullback
    d_world[~image.hit.reshape(-1)] = 0.0
    res.backward(fieldsdf, grads, d_normal=d_world)


# ---------------------------------------------------------------------------
# Stage-2 mesh rendering
# ---------------------------------------------------------------------------


@dataclass
class MeshRenderResult:
    """Per-pixel mesh render with hooks to backpropagate to vertex positions."""

    hit: np.ndarray        # (P,) bool over pixels
    face: np.ndarray       # (P,)
    t: np.ndarray          # (P,)
    u: np.ndarray
    v: np.ndarray
    normal: np.ndarray     # (P,3) world-frame interpolated unit normals
    origins: np.ndarray
    dirs: np.ndarray
    mesh: TriangleMesh

    def backward_to_vertices(self, d_normal: np.ndarray | None = None,
                             d_depth: np.ndarray | None = None) -> np.ndarray:
        """Return dL/d(vertex positions) given per-pixel upstream grads."""
        mesh = self.mesh
        dV = np.zeros_like(mesh.vertices)
        hit = self.hit
        if not hit.any():
            return dV
        faces = mesh.faces[self.face[hit]]
        vn = mesh.vertex_normals
        n0, n1, n2 = vn[faces[:, 0]], vn[faces[:, 1]], vn[faces[:, 2]]
        u = self.u[hit]
        v = self.v[hit]
        dldu = np.zeros(len(u))
        dldv = np.zeros(len(u))
        dldt = np.zeros(len(u))
        d_vertex_normals = np.zeros_like(vn)
        if d_normal is not None:
            dn = np.asarray(d_normal, dtype=np.float64).reshape(-1, 3)[hit]
            w = n0 + u[:, None] * (n1 - n0) + v[:, None] * (n2 - n0)
            wn = np.linalg.norm(w, axis=1)
            nw = w / wn[:, None]
            dldw = (dn - nw * np.sum(nw * dn, axis=1)[:, None]) / wn[:, None]
            dldu += np.sum(dldw * (n1 - n0), axis=1)
            dldv += np.sum(dldw * (n2 - n0), axis=1)
            bary0 = (1.0 - u - v)[:, None] * dldw
            np.add.at(d_vertex_normals, faces[:, 0], bary0)
            np.add.at(d_vertex_normals, faces[:, 1], u[:, None] * dldw)
            np.add.at(d_vertex_normals, faces[:, 2], v[:, None] * dldw)
        if d_depth is not None:
            dldt += np.asarray(d_depth, dtype=np.float64).reshape(-1)[hit]

        # Moller-Trumbore jacobian: (u, v, t) -> triangle corners
        V = mesh.vertices
        V0, V1, V2 = V[faces[:, 0]], V[faces[:, 1]], V[faces[:, 2]]
        o = self.origins[hit]
        d = self.dirs[hit]
        e1 = V1 - V0
        e2 = V2 - V0
        T = o - V0
        F1 = np.sum(d * np.cross(e2, e1), axis=1)
        tq = np.cross(T, d)
        # F2 = triple(T, d, e2); F3 = triple(d, T, e1); F4 = triple(e2, T, e1)
        inv = 1.0 / F1
        cu = (dldu * inv)[:, None]
        cv = (dldv * inv)[:, None]
        ct = (dldt * inv)[:, None]
        base = (dldu * self.u[hit] + dldv * self.v[hit] + dldt * self.t[hit]) * inv
        dF1_de1 = np.cross(d, e2)
        dF1_de2 = np.cross(e1, d)
        de1 = -base[:, None] * dF1_de1
        de2 = -base[:, None] * dF1_de2
        dT = np.zeros_like(de1)
        # F2 = T.(d x e2): dT += cu*(d x e2); de2 += cu*(T x d)
        dT += cu * np.cross(d, e2)
        de2 += cu * tq
        # F3 = d.(T x e1) = T.(e1 x d): dT += cv*(e1 x d); de1 += cv*(d x T)
        dT += cv * np.cross(e1, d)
        de1 += cv * np.cross(d, T)
        # F4 = e2.(T x e1): de2 += ct*(T x e1); dT += ct*(e1 x e2); de1 += ct*(e2 x T)
        de2 += ct * np.cross(T, e1)
        dT += ct * np.cross(e1, e2)
        de1 += ct * np.cross(e2, T)

        dV0 = -de1 - de2 - dT
        np.add.at(dV, faces[:, 0], dV0)
        np.add.at(dV, faces[:, 1], de1)
        np.add.at(dV, faces[:, 2], de2)

        if d_normal is not None:
            dV += vertex_normal_backward(mesh, d_vertex_normals)
        return dV


def vertex_normal_backward(mesh: TriangleMesh, d_vertex_normals: np.ndarray) -> np.ndarray:
    """dL/d(vertices) given dL/d(unit vertex normals)."""
    V = mesh.vertices
    F = mesh.faces
    fn_unnorm = np.cross(V[F[:, 1]] - V[F[:, 0]], V[F[:, 2]] - V[F[:, 0]])
    u = np.zeros_like(V)
    for k in range(3):
        np.add.at(u, F[:, k], fn_unnorm)
    un = np.linalg.norm(u, axis=1)
    un_safe = np.where(un > 1e-300, un, 1.0)
    nhat = u / un_safe[:, None]
    dldu = (d_vertex_normals - nhat * np.sum(nhat * d_vertex_normals, axis=1)[:, None])
    dldu /= un_safe[:, None]
    # each face normal feeds the three corner accumulators
    w = dldu[F[:, 0]] + dldu[F[:, 1]] + dldu[F[:, 2]]
    p = V[F[:, 1]] - V[F[:, 0]]
    q = V[F[:, 2]] - V[F[:, 0]]
    dp = np.cross(q, w)
    dq = np.cross(w, p)
    dV = np.zeros_like(V)
    np.add.at(dV, F[:, 1], dp)
    np.add.at(dV, F[:, 2], dq)
    np.add.at(dV, F[:, 0], -dp - dq)
    return dV


def raycast_mesh(caster: RayCaster, origins: np.ndarray, dirs: np.ndarray,
                 t_min=1e-9, t_max=np.inf) -> MeshRenderResult:
    """Cast pixel rays at a mesh and compute interpolated normals + barycentrics."""
    origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
    t, face = caster.cast_batch(origins, dirs, t_min=t_min, t_max=t_max)
    hit = face >= 0
    mesh = caster.mesh
    u = np.zeros(len(t))
    v = np.zeros(len(t))
    normal = np.zeros((len(t), 3))
    if hit.any():
        faces = mesh.faces[face[hit]]
        V = mesh.vertices
        V0, V1, V2 = V[faces[:, 0]], V[faces[:, 1]], V[faces[:, 2]]
        o = origins[hit]
        d = dirs[hit]
        e1 = V1 - V0
        e2 = V2 - V0
        T = o - V0
        p = np.cross(d, e2)
        det = np.sum(e1 * p, axis=1)
        q = np.cross(T, e1)
        uu = np.sum(T * p, axis=1) / det
        vv = np.sum(d * q, axis=1) / det
        u[hit] = uu
        v[hit] = vv
        vn = mesh.vertex_normals
        w = (vn[faces[:, 0]] * (1 - uu - vv)[:, None]
             + vn[faces[:, 1]] * uu[:, None] + vn[faces[:, 2]] * vv[:, None])
        wn = np.linalg.norm(w, axis=1, keepdims=True)
        normal[hit] = w / np.where(wn > 1e-300, wn, 1.0)
    return MeshRenderResult(hit=hit, face=face, t=t, u=u, v=v, normal=normal,
                            origins=origins, dirs=dirs, mesh=mesh)


def render_mesh_normals(mesh: TriangleMesh | None, cam: ViewCamera) -> NormalImage:
    """Normal image of a triangle mesh (empty mesh renders all background)."""
    img = np.tile(BACKGROUND_NORMAL, (cam.height * cam.width, 1))
    hit = np.zeros(cam.height * cam.width, dtype=bool)
    result = None
    if mesh is not None and mesh.n_faces > 0:
        caster = RayCaster(mesh)
        origins, dirs = cam.rays()
        result = raycast_mesh(caster, origins, dirs)
        M = cam.view_matrix()
        img[result.hit] = result.normal[result.hit] @ M.T
        hit = result.hit
    return NormalImage(normals=img.reshape(cam.height, cam.width, 3),
                       hit=hit.reshape(cam.height, cam.width).copy(),
                       camera=cam, _mesh_render=result)


def mesh_normal_image_backward(image: NormalImage, d_image: np.ndarray) -> np.ndarray | None:
    """Image-space gradient -> dL/d(mesh vertices). None for empty renders."""
    result = image._mesh_render
    if result is None:
        return None
    M = image.camera.view_matrix()
    d_world = np.asarray(d_image, dtype=np.float64).reshape(-1, 3) @ M
    d_world[~image.hit.reshape(-1)] = 0.0
    return result.backward_to_vertices(d_normal=d_world)
