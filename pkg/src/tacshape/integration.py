"""From contact measurements to virtual-camera ray observations.

integrate_gradients recovers depth from a per-pixel gradient field through a
Poisson solve (spectral on full rectangles, sparse least squares otherwise).
to_virtual_observation re-expresses a tactile observation as an orthographic
camera placed behind the contact patch; observation_rays extracts one
constrained ray per masked pixel.

Depth convention for the virtual camera: the camera sits `standoff` behind
the first-contact plane along the sensor's -z axis, so
depth_cam = standoff + max(depth) - depth. Deeper indentation is closer to
the camera, and casting each emitted ray back at the ground-truth surface
reproduces d(r) to pixel accuracy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage, sparse
from scipy.fft import dstn, idstn
from scipy.sparse.linalg import spsolve

from .geometry import Pose
from .imgio import read_pfm, write_pfm
from .losses import RayBatch
from .touchsim import SensorSpec, TactileObservation

DEFAULT_STANDOFF = 0.020
DEFAULT_MASK_THRESHOLD = 5e-5  # 0.05 mm


@dataclass
class GradientField:
    """Per-pixel surface slopes (d depth / d x, d depth / d y) and a mask."""

    gx: np.ndarray
    gy: np.ndarray
    mask: np.ndarray

    def validate(self) -> None:
        if not self.mask.any():
            raise ValueError("gradient field has an empty mask")
        if not (np.isfinite(self.gx[self.mask]).all()
                and np.isfinite(self.gy[self.mask]).all()):
            raise ValueError("non-finite gradients inside the mask")


@dataclass
class RaySample:
    """One constrained ray with its observed depth and normal."""

    origin: np.ndarray
    direction: np.ndarray
    d: float
    n: np.ndarray
    touch_id: int


@dataclass
class VirtualObservation:
    """Orthographic depth/normal images seen from behind the contact patch."""

    camera_pose: Pose           # world; +z is the viewing axis (into the object)
    pixel_pitch: tuple[float, float]
    depth: np.ndarray           # (H,W) camera-frame depth on the mask
    normals: np.ndarray         # (H,W,3) camera-frame unit normals on the mask
    mask: np.ndarray            # (H,W) bool (eroded contact mask)
    standoff: float
    touch_id: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape


def integrate_gradients(g: GradientField, pitch_x: float = 1.0,
                        pitch_y: float = 1.0, boundary: str = "dirichlet") -> np.ndarray:
    """Solve the masked Poisson problem for depth.

    boundary="dirichlet": zero depth just outside the mask (physical for
    contact patches, where the surface meets the undeformed gel plane).
    boundary="natural": pure least squares on interior pixel pairs, gauge
    fixed to zero mean (recovers unbounded surfaces such as planes exactly).
    """
    g.validate()
    if boundary not in ("dirichlet", "natural"):
        raise ValueError(f"unknown boundary mode {boundary!r}")
    mask = g.mask.astype(bool)
    h, w = mask.shape
    gx = np.where(mask, g.gx, 0.0) * pitch_x  # depth change per pixel step
    gy = np.where(mask, g.gy, 0.0) * pitch_y

    if boundary == "dirichlet":
        r0, r1, c0, c1 = _mask_bbox(mask)
        if mask[r0:r1, c0:c1].all():
            z = _poisson_dst(gx[r0:r1, c0:c1], gy[r0:r1, c0:c1])
            out = np.zeros((h, w))
            out[r0:r1, c0:c1] = z
            return out
        return _poisson_sparse(gx, gy, mask, dirichlet=True)
    return _poisson_sparse(gx, gy, mask, dirichlet=False)


def _mask_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    rows = np.nonzero(mask.any(axis=1))[0]
    cols = np.nonzero(mask.any(axis=0))[0]
    return rows[0], rows[-1] + 1, cols[0], cols[-1] + 1


def _divergence(gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Backward difference of pair-averaged gradient samples (the pair between
    pixels p and q carries (g_p + g_q)/2, zero outside the domain). Midpoint
    sampling keeps boundary errors zero-mean, which matters for caps whose
    slope does not vanish at the rim."""
    pair_x = np.zeros((gx.shape[0], gx.shape[1] + 1))
    pair_x[:, 1:-1] = 0.5 * (gx[:, :-1] + gx[:, 1:])
    pair_x[:, 0] = 0.5 * gx[:, 0]
    pair_x[:, -1] = 0.5 * gx[:, -1]
    pair_y = np.zeros((gy.shape[0] + 1, gy.shape[1]))
    pair_y[1:-1, :] = 0.5 * (gy[:-1, :] + gy[1:, :])
    pair_y[0, :] = 0.5 * gy[0, :]
    pair_y[-1, :] = 0.5 * gy[-1, :]
    return np.diff(pair_x, axis=1) + np.diff(pair_y, axis=0)


def _poisson_dst(gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Zero-Dirichlet Poisson solve on a full rectangle via DST-I."""
    h, w = gx.shape
    rhs = _divergence(gx, gy)
    lam_y = 2.0 * np.cos(np.pi * np.arange(1, h + 1) / (h + 1)) - 2.0
    lam_x = 2.0 * np.cos(np.pi * np.arange(1, w + 1) / (w + 1)) - 2.0
    denom = lam_y[:, None] + lam_x[None, :]
    zhat = dstn(rhs, type=1, norm="ortho") / denom
    return idstn(zhat, type=1, norm="ortho")


def _poisson_sparse(gx: np.ndarray, gy: np.ndarray, mask: np.ndarray,
                    dirichlet: bool) -> np.ndarray:
    h, w = mask.shape
    ids = np.full((h, w), -1, dtype=np.int64)
    ids[mask] = np.arange(int(mask.sum()))
    n = int(mask.sum())
    rows: list[np.ndarray] = []
    cols: list[np.ndarray] = []
    vals: list[np.ndarray] = []
    rhs = np.zeros(n)
    diag = np.zeros(n)

    # pixel pairs along each axis; the gradient sample lives on the first pixel
    for axis in (0, 1):
        if axis == 0:
            src = np.zeros_like(mask)
            src[:, :-1] = True
            shift = (0, 1)
            gval = gx
        else:
            src = np.zeros_like(mask)
            src[:-1, :] = True
            shift = (1, 0)
            gval = gy
        src_ids = ids
        dst_ids = np.full((h, w), -1, dtype=np.int64)
        dst_ids[:h - shift[0], :w - shift[1]] = ids[shift[0]:, shift[1]:]
        in_src = np.zeros_like(mask)
        in_src[:h - shift[0], :w - shift[1]] = mask[shift[0]:, shift[1]:]
        a = src & mask            # src pixel is an unknown
        b = src & in_src          # dst pixel is an unknown
        if dirichlet:
            pair = src & (a | b)  # anchor pairs touching the zero ring too
        else:
            pair = src & a & b
        ai = src_ids[pair]
        bi = dst_ids[pair]
        # midpoint gradient sample for the pair (zero outside the mask)
        g_src = np.where(mask, gval, 0.0)
        g_dst = np.zeros_like(gval)
        g_dst[:h - shift[0], :w - shift[1]] = g_src[shift[0]:, shift[1]:]
        gv = 0.5 * (g_src[pair] + g_dst[pair])
        # accumulate normal equations of (z_b - z_a - g)^2
        known_a = ai >= 0
        known_b = bi >= 0
        # diagonal terms
        np.add.at(diag, ai[known_a], 1.0)
        np.add.at(diag, bi[known_b], 1.0)
        both = known_a & known_b
        rows.append(ai[both])
        cols.append(bi[both])
        vals.append(-np.ones(int(both.sum())))
        rows.append(bi[both])
        cols.append(ai[both])
        vals.append(-np.ones(int(both.sum())))
        np.add.at(rhs, ai[known_a], -gv[known_a])
        np.add.at(rhs, bi[known_b], gv[known_b])

    rows.append(np.arange(n))
    cols.append(np.arange(n))
    vals.append(diag)
    A = sparse.csr_matrix((np.concatenate(vals),
                           (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    if dirichlet:
        z = spsolve(A.tocsc(), rhs)
    else:
        # natural boundary: A is singular (constants); fix the zero-mean gauge
        # with a Lagrange-bordered system
        ones = sparse.csr_matrix(np.ones((1, n)))
        K = sparse.bmat([[A, ones.T], [ones, None]], format="csc")
        sol = spsolve(K, np.concatenate([rhs, [0.0]]))
        z = sol[:n]
    out = np.zeros((h, w))
    out[mask] = z
    return out


def mask_from_depth(depth: np.ndarray, threshold: float = DEFAULT_MASK_THRESHOLD) -> np.ndarray:
    """Threshold the depth map and keep the largest connected component."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    raw = depth > threshold
    if not raw.any():
        return raw
    labels, count = ndimage.label(raw)
    if count == 1:
        return raw
    sizes = ndimage.sum_labels(np.ones_like(depth), labels, index=np.arange(1, count + 1))
    keep = 1 + int(np.argmax(sizes))
    return labels == keep


def to_virtual_observation(obs: TactileObservation, spec: SensorSpec | None = None,
                           standoff: float = DEFAULT_STANDOFF) -> VirtualObservation:
    """Place an orthographic camera `standoff` behind the contact patch and
    express the observation as camera-frame depth and normal images."""
    spec = spec or obs.spec
    if not obs.mask.any():
        raise ValueError("cannot build a virtual observation from an empty mask")
    eroded = ndimage.binary_erosion(obs.mask)
    if not eroded.any():
        raise ValueError("contact mask too small after erosion")
    r0, r1, c0, c1 = _mask_bbox(eroded)
    if (r1 - r0) < 3 or (c1 - c0) < 3:
        raise ValueError("contact mask too small for central differences (<3x3)")

    max_d = float(obs.depth[obs.mask].max())
    depth_cam_full = standoff + max_d - np.where(obs.mask, obs.depth, 0.0)
    # fill outside the contact with nearest inside values so central
    # differences at eroded-mask pixels never read the fill
    depth_cam = _nearest_fill(depth_cam_full, obs.mask)

    dz_dj = np.zeros_like(depth_cam)
    dz_di = np.zeros_like(depth_cam)
    dz_dj[:, 1:-1] = (depth_cam[:, 2:] - depth_cam[:, :-2]) / 2.0
    dz_di[1:-1, :] = (depth_cam[2:, :] - depth_cam[:-2, :]) / 2.0
    px = spec.pitch_x
    py = spec.pitch_y
    n = np.stack([py * dz_dj, -px * dz_di, np.full_like(depth_cam, -px * py)], axis=-1)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)

    camera_pose = obs.sensor_pose.compose(
        Pose(np.eye(3), np.array([0.0, 0.0, -(standoff + max_d)])))
    return VirtualObservation(camera_pose=camera_pose,
                              pixel_pitch=(px, py),
                              depth=np.where(eroded, depth_cam, 0.0),
                              normals=np.where(eroded[..., None], n, 0.0),
                              mask=eroded,
                              standoff=standoff,
                              touch_id=obs.touch_id)


def _nearest_fill(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    if mask.all():
        return values.copy()
    _, (ri, ci) = ndimage.distance_transform_edt(~mask, return_indices=True)
    return values[ri, ci]


def observation_rays(vobs: VirtualObservation, world_pose: Pose | None = None) -> RayBatch:
    """One RaySample per masked pixel, transformed to the world frame."""
    pose = vobs.camera_pose if world_pose is None else world_pose.compose(vobs.camera_pose)
    h, w = vobs.shape
    px, py = vobs.pixel_pitch
    xs = (np.arange(w) + 0.5) * px - (w * px) / 2
    ys = (h * py) / 2 - (np.arange(h) + 0.5) * py
    gx, gy = np.meshgrid(xs, ys)
    sel = vobs.mask
    local_origins = np.stack([gx[sel], gy[sel], np.zeros(int(sel.sum()))], axis=-1)
    origins = pose.apply(local_origins)
    direction = pose.rotation[:, 2]
    dirs = np.broadcast_to(direction, origins.shape).copy()
    d = vobs.depth[sel]
    normals = vobs.normals[sel] @ pose.rotation.T
    touch = np.full(len(d), vobs.touch_id, dtype=np.int64)
    return RayBatch(origins=origins, dirs=dirs, d=d.copy(), n=normals,
                    touch_id=touch)


def ray_samples(batch: RayBatch) -> list[RaySample]:
    """Expand a batch to the per-ray record form."""
    return [RaySample(origin=batch.origins[i], direction=batch.dirs[i],
                      d=float(batch.d[i]), n=batch.n[i],
                      touch_id=int(batch.touch_id[i]))
            for i in range(len(batch))]


# ---------------------------------------------------------------------------
# Sidecar serialization
# ---------------------------------------------------------------------------


def save_virtual_observation(vobs: VirtualObservation, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_pfm(directory / "virtual_depth.pfm", np.where(vobs.mask, vobs.depth, 0.0))
    write_pfm(directory / "virtual_normals.pfm", vobs.normals)
    pose = vobs.camera_pose
    sidecar = {
        "standoff_m": vobs.standoff,
        "pixel_pitch_m": list(vobs.pixel_pitch),
        "pose": {"rotation": pose.rotation.reshape(-1).tolist(),
                 "translation": pose.translation.tolist()},
        "touch_id": vobs.touch_id,
    }
    (directory / "virtual.json").write_text(json.dumps(sidecar, indent=2))


def load_virtual_observation(directory) -> VirtualObservation:
    directory = Path(directory)
    sidecar = json.loads((directory / "virtual.json").read_text())
    depth = read_pfm(directory / "virtual_depth.pfm")
    normals = read_pfm(directory / "virtual_normals.pfm")
    pose = Pose(np.array(sidecar["pose"]["rotation"]).reshape(3, 3),
                np.array(sidecar["pose"]["translation"]))
    mask = depth > 0.0
    return VirtualObservation(camera_pose=pose,
                              pixel_pitch=tuple(sidecar["pixel_pitch_m"]),
                              depth=depth, normals=normals, mask=mask,
                              standoff=sidecar["standoff_m"],
                              touch_id=sidecar["touch_id"])


def save_gradient_field(g: GradientField, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_pfm(directory / "grad_x.pfm", np.where(g.mask, g.gx, 0.0))
    write_pfm(directory / "grad_y.pfm", np.where(g.mask, g.gy, 0.0))


def load_gradient_field(directory, mask: np.ndarray | None = None) -> GradientField:
    directory = Path(directory)
    gx = read_pfm(directory / "grad_x.pfm")
    gy = read_pfm(directory / "grad_y.pfm")
    if mask is None:
        mask = np.isfinite(gx) & ((gx != 0.0) | (gy != 0.0))
    return GradientField(gx=gx, gy=gy, mask=mask)
