"""Optimization objectives for both stages.

Stage 1 (grid field): per-ray depth/normal discrepancy against tactile
observations, truncated-band distance supervision, freespace hinge, Eikonal
regularization, and guidance-gradient assembly. Stage 2 (tet grid): mesh
depth/normal terms plus normal consistency.

Sign conventions: the field is negative inside the object; the band target
along a ray with observed depth d at sample depth s is (d - s), positive on
the camera side of the surface.

Every function accumulates scaled parameter gradients in place and returns
the unweighted loss value, so a weighted joint assembly equals the sum of
separately assembled terms.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .field import GridSDF
from .guidance import CameraExtension, EXT_CAMERAS, GuidanceBackend, GuidanceRequest
from .render import (NormalImage, RayRenderResult, ViewCamera,
                     mesh_normal_image_backward, normal_image_backward,
                     render_normal_image, render_rays)


@dataclass
class LossWeights:
    """Per-term weights; w_normal ramps linearly from start to end."""

    w_depth: float = 1.0
    w_normal_start: float = 0.025
    w_normal_end: float = 1.0
    w_normal_ramp_steps: int = 6000
    w_sdf: float = 2.0
    w_fs: float = 2.0
    w_eik: float = 0.01
    w_sds: float = 1.0
    w_nc: float = 0.5
    w_smooth: float = 50.0  # parameter-space Laplacian damping
    delta: float = 0.05  # truncation distance, domain units

    def __post_init__(self):
        values = [self.w_depth, self.w_normal_start, self.w_normal_end,
                  self.w_sdf, self.w_fs, self.w_eik, self.w_sds, self.w_nc,
                  self.w_smooth]
        if any(v < 0 for v in values):
            raise ValueError("loss weights must be non-negative")
        if self.w_normal_ramp_steps < 0:
            raise ValueError("ramp_steps must be >= 0")
        if self.delta <= 0:
            raise ValueError("truncation distance must be positive")

    def normal_weight(self, step: int) -> float:
        if self.w_normal_ramp_steps == 0:
            return self.w_normal_end
        frac = min(step / self.w_normal_ramp_steps, 1.0)
        return self.w_normal_start + (self.w_normal_end - self.w_normal_start) * frac


@dataclass
class RayBatch:
    """Pooled tactile ray observations (world frame)."""

    origins: np.ndarray    # (N,3)
    dirs: np.ndarray       # (N,3) unit
    d: np.ndarray          # (N,) observed depth along the ray
    n: np.ndarray          # (N,3) observed unit normal
    touch_id: np.ndarray   # (N,)

    def __len__(self) -> int:
        return len(self.d)

    def subset(self, idx) -> "RayBatch":
        return RayBatch(self.origins[idx], self.dirs[idx], self.d[idx],
                        self.n[idx], self.touch_id[idx])

    @staticmethod
    def concatenate(batches: list["RayBatch"]) -> "RayBatch":
        return RayBatch(
            origins=np.concatenate([b.origins for b in batches]),
            dirs=np.concatenate([b.dirs for b in batches]),
            d=np.concatenate([b.d for b in batches]),
            n=np.concatenate([b.n for b in batches]),
            touch_id=np.concatenate([b.touch_id for b in batches]),
        )


_MISS_MARGIN_FRACTION = 0.5  # hinge margin for missed rays, in units of delta
# silhouette sculpting is low-frequency: restrict its scatter to coarse levels
_SILHOUETTE_LEVELS = 2


def depth_normal_loss(fieldsdf: GridSDF, batch: RayBatch, grads: list[np.ndarray],
                      scale_depth: float, scale_normal: float,
                      delta: float, n_samples: int = 512,
                      render: RayRenderResult | None = None) -> dict:
    """L_depth = E|d - d_theta|, L_normal = E||n - n_theta||_1 over rendered rays.

    Rays whose render misses the surface contribute a hinge penalty pushing
    the field negative at the observed depth (weighted like the depth term).
    """
    if len(batch) == 0:
        raise ValueError("empty ray batch")
    if render is None:
        render = render_rays(fieldsdf, batch.origins, batch.dirs, n_samples=n_samples)
    use = render.usable()
    n_use = int(use.sum())
    out = {"depth": 0.0, "normal": 0.0, "miss": 0.0,
           "n_used": n_use, "n_missed": int((~render.hit).sum())}
    if n_use:
        derr = batch.d[use] - render.depth[use]
        nerr = batch.n[use] - render.normal[use]
        out["depth"] = float(np.abs(derr).mean())
        out["normal"] = float(np.abs(nerr).sum(axis=1).mean())
        d_depth = np.zeros(len(batch))
        d_normal = np.zeros((len(batch), 3))
        d_depth[use] = -np.sign(derr) * (scale_depth / n_use)
        d_normal[use] = -np.sign(nerr) * (scale_normal / n_use)
        render.backward(fieldsdf, grads, d_depth=d_depth, d_normal=d_normal)
    miss = ~render.hit
    if miss.any():
        margin = _MISS_MARGIN_FRACTION * delta
        pts = batch.origins[miss] + batch.d[miss, None] * batch.dirs[miss]
        vals = fieldsdf.eval_values(pts)
        act = np.maximum(vals + margin, 0.0)
        out["miss"] = float((act ** 2).mean())
        coeff = 2.0 * act * (scale_depth / len(act))
        fieldsdf.scatter_value_grad(grads, pts, coeff)
    return out


def sdf_loss(fieldsdf: GridSDF, batch: RayBatch, delta: float, m_band: int,
             rng: np.random.Generator, grads: list[np.ndarray],
             scale: float) -> float:
    """Truncated-band supervision: E_r E_s |f(x(r,s)) - (d(r) - s)| with
    stratified uniform s in [d - delta, d + delta]."""
    if m_band < 1:
        raise ValueError("m_band must be >= 1")
    n = len(batch)
    strata = (np.arange(m_band) + rng.random((n, m_band))) / m_band
    s = batch.d[:, None] - delta + 2.0 * delta * strata  # (n, m)
    pts = (batch.origins[:, None, :] + s[..., None] * batch.dirs[:, None, :]).reshape(-1, 3)
    target = (batch.d[:, None] - s).reshape(-1)
    inside = (np.abs(pts) <= 1.0).all(axis=1)
    pts = pts[inside]
    target = target[inside]
    if len(pts) == 0:
        return 0.0
    vals = fieldsdf.eval_values(pts)
    resid = vals - target
    loss = float(np.abs(resid).mean())
    fieldsdf.scatter_value_grad(grads, pts, np.sign(resid) * (scale / resid.size))
    return loss


def freespace_loss(fieldsdf: GridSDF, batch: RayBatch, delta: float, m_fs: int,
                   rng: np.random.Generator, grads: list[np.ndarray],
                   scale: float) -> float:
    """Freespace hinge: E ReLU(delta - f)^2 over s in [0, d - delta].

    Rays with d <= delta have no freespace interval and are skipped.
    """
    if m_fs < 1:
        raise ValueError("m_fs must be >= 1")
    ok = batch.d > delta
    if not ok.any():
        return 0.0
    sub = batch.subset(ok)
    n = len(sub)
    strata = (np.arange(m_fs) + rng.random((n, m_fs))) / m_fs
    s = (sub.d - delta)[:, None] * strata
    pts = (sub.origins[:, None, :] + s[..., None] * sub.dirs[:, None, :]).reshape(-1, 3)
    inside = (np.abs(pts) <= 1.0).all(axis=1)
    pts = pts[inside]
    if len(pts) == 0:
        return 0.0
    vals = fieldsdf.eval_values(pts)
    act = np.maximum(delta - vals, 0.0)
    loss = float((act ** 2).mean())
    fieldsdf.scatter_value_grad(grads, pts, -2.0 * act * (scale / act.size))
    return loss


def grid_smoothness_loss(fieldsdf: GridSDF, grads: list[np.ndarray],
                         scale: float) -> float:
    """Mean squared 6-neighbour Laplacian of the grid parameters.

    Dense grids lack the spectral bias an MLP representation brings; this
    parameter-space smoother supplies it, damping the node-level churn that
    sparse silhouette gradients otherwise leave behind."""
    if scale == 0.0:
        return 0.0
    total = 0.0
    count = 0
    for lvl in range(fieldsdf.active_levels):
        count += max(0, (fieldsdf.resolutions[lvl] - 2) ** 3)
    if count == 0:
        return 0.0
    for lvl in range(fieldsdf.active_levels):
        g = fieldsdf.levels[lvl]
        if g.shape[0] < 3:
            continue
        lap = (-6.0 * g[1:-1, 1:-1, 1:-1]
               + g[2:, 1:-1, 1:-1] + g[:-2, 1:-1, 1:-1]
               + g[1:-1, 2:, 1:-1] + g[1:-1, :-2, 1:-1]
               + g[1:-1, 1:-1, 2:] + g[1:-1, 1:-1, :-2])
        total += float((lap ** 2).sum())
        # adjoint of the stencil applied to lap
        coeff = (2.0 * scale / count) * lap
        acc = grads[lvl]
        acc[1:-1, 1:-1, 1:-1] += -6.0 * coeff
        acc[2:, 1:-1, 1:-1] += coeff
        acc[:-2, 1:-1, 1:-1] += coeff
        acc[1:-1, 2:, 1:-1] += coeff
        acc[1:-1, :-2, 1:-1] += coeff
        acc[1:-1, 1:-1, 2:] += coeff
        acc[1:-1, 1:-1, :-2] += coeff
    return total / count


def eikonal_loss(fieldsdf: GridSDF, n_points: int, rng: np.random.Generator,
                 grads: list[np.ndarray], scale: float,
                 halfextent: float = 1.0) -> float:
    """E[(|grad f| - 1)^2] at uniform domain points."""
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    pts = rng.uniform(-halfextent, halfextent, size=(n_points, 3))
    sample = fieldsdf.eval(pts)
    g = sample.spatial_grad
    gn = np.linalg.norm(g, axis=1)
    loss = float(((gn - 1.0) ** 2).mean())
    nz = gn > 1e-12
    if nz.any():
        coeff = np.zeros_like(g)
        coeff[nz] = (2.0 * (gn[nz] - 1.0) / gn[nz])[:, None] * g[nz] * (scale / n_points)
        fieldsdf.scatter_spatial_grad(grads, pts[nz], coeff[nz])
    return loss


def normal_consistency_loss(mesh, info, tet, grad_s: np.ndarray,
                            grad_dv: np.ndarray, scale: float) -> float:
    """Mean (1 - cos) of unit vertex normals across unique mesh edges,
    chained to the tet parameters. Empty mesh contributes 0."""
    from .render import vertex_normal_backward
    if mesh is None or mesh.n_faces == 0:
        return 0.0
    edges = mesh.edges()
    if len(edges) == 0:
        return 0.0
    vn = mesh.vertex_normals
    ni = vn[edges[:, 0]]
    nj = vn[edges[:, 1]]
    cos = np.sum(ni * nj, axis=1)
    loss = float((1.0 - cos).mean())
    d_vn = np.zeros_like(vn)
    w = scale / len(edges)
    np.add.at(d_vn, edges[:, 0], -nj * w)
    np.add.at(d_vn, edges[:, 1], -ni * w)
    dV = vertex_normal_backward(mesh, d_vn)
    info.backprop_vertices(dV, tet, grad_s, grad_dv)
    return loss


@dataclass
class SdsBatch:
    """One guidance round: cameras to render, prompt, and sampling controls."""

    cameras: list[ViewCamera]
    prompt: str
    t_min: int = 20
    t_max: int = 980
    seed: int = 0
    guidance_scale: float = 100.0

    def __post_init__(self):
        if not self.cameras:
            raise ValueError("SdsBatch requires at least one camera")
        if self.t_min < 1 or self.t_max < self.t_min:
            raise ValueError("invalid timestep range")


@dataclass
class SdsOutcome:
    requests_sent: int = 0
    grad_norm: float = 0.0
    skipped: bool = False
    images: list[NormalImage] = dc_field(default_factory=list)


def _camera_request(image: NormalImage, batch: SdsBatch, request_id: int,
                    seed: int) -> GuidanceRequest:
    cam = image.camera
    ext = CameraExtension(rotations=cam.pose.rotation[None],
                          translations=cam.pose.translation[None],
                          fovs_deg=np.array([cam.fov_deg]))
    return GuidanceRequest(
        request_id=request_id, prompt=batch.prompt,
        images=image.normals[None].astype(np.float32),
        t_min=batch.t_min, t_max=batch.t_max, seed=seed,
        guidance_scale=batch.guidance_scale,
        extensions=[(EXT_CAMERAS, ext.encode())])


def sds_step_field(fieldsdf: GridSDF, grads: list[np.ndarray], batch: SdsBatch,
                   backend: GuidanceBackend, w_sds: float,
                   n_samples: int = 512, request_id_base: int = 0,
                   formation_margin: float = 0.025) -> SdsOutcome:
    """Render one normal image per camera, fetch image-space gradients from
    the backend, and chain them into field parameter gradients.

    Three chains per view:
      - hit pixels flow through the differentiable normal render;
      - miss pixels with a nonzero backend gradient (it wants surface there)
        push the ray's closest-approach field value below -formation_margin,
        which lets guidance create geometry no tactile ray constrains;
      - hit pixels whose descent direction points at the background constant
        (it wants the pixel empty) push the field up at the crossing, which
        retracts silhouettes. Both extra chains vanish for zero gradients.

    There is no loss value: guidance is a gradient, not an objective.
    """
    from .render import BACKGROUND_NORMAL
    outcome = SdsOutcome()
    for i, cam in enumerate(batch.cameras):
        image = render_normal_image(fieldsdf, cam, n_samples=n_samples)
        req = _camera_request(image, batch, request_id_base + i, batch.seed + i)
        reply = backend.request_gradient(req)
        outcome.requests_sent += 1
        # per-pixel mean normalization keeps guidance comparable to the
        # (mean-reduced) tactile terms across render resolutions
        g = reply.gradients[0].astype(np.float64) * (w_sds / (cam.width * cam.height))
        normal_image_backward(image, fieldsdf, grads, g)
        res = image._ray_result
        g_flat = g.reshape(-1, 3)
        want = np.linalg.norm(g_flat, axis=1)
        miss = (~res.hit) & (res.min_f < np.inf)
        active = miss & (want > 1e-12) & (res.min_f > -formation_margin)
        if active.any():
            pts = res.origins[active] + res.t_min_f[active, None] * res.dirs[active]
            inside = (np.abs(pts) <= 1.0).all(axis=1)
            fieldsdf.scatter_value_grad(grads, pts[inside], want[active][inside],
                                        max_levels=_SILHOUETTE_LEVELS)
        use = res.usable()
        if use.any():
            img_flat = image.normals.reshape(-1, 3)
            to_bg = BACKGROUND_NORMAL[None, :] - img_flat
            to_bg_n = np.linalg.norm(to_bg, axis=1)
            cos = -np.sum(g_flat * to_bg, axis=1) / np.maximum(want * to_bg_n, 1e-300)
            retract = use & (want > 1e-12) & (cos > 0.9)
            if retract.any():
                fieldsdf.scatter_value_grad(grads, res.points[retract],
                                            -want[retract],
                                            max_levels=_SILHOUETTE_LEVELS)
        outcome.grad_norm += float(np.linalg.norm(g))
        outcome.images.append(image)
    return outcome


def sds_step_mesh(mesh, batch: SdsBatch, backend: GuidanceBackend,
                  w_sds: float, request_id_base: int = 0) -> tuple[np.ndarray | None, SdsOutcome]:
    """Stage-2 guidance: returns dL/d(mesh vertices) plus bookkeeping."""
    from .render import render_mesh_normals
    outcome = SdsOutcome()
    dV_total = None
    for i, cam in enumerate(batch.cameras):
        image = render_mesh_normals(mesh, cam)
        req = _camera_request(image, batch, request_id_base + i, batch.seed + i)
        reply = backend.request_gradient(req)
        outcome.requests_sent += 1
        g = reply.gradients[0].astype(np.float64) * (w_sds / (cam.width * cam.height))
        dV = mesh_normal_image_backward(image, g)
        if dV is not None:
            dV_total = dV if dV_total is None else dV_total + dV
            outcome.grad_norm += float(np.linalg.norm(g))
        outcome.images.append(image)
    return dV_total, outcome
