"""Simulated gel-sensor touches: pose planning and contact depth maps.

The gel is modeled as rigid-plane indentation: the sensor frame has the
undeformed gel plane at z = 0 with +z pointing into the object, and the
contact depth map is the per-pixel protrusion of the object through that
plane (clamped to the indentation limit). An optional Gaussian filter stands
in for elastomer low-pass behaviour.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .bvh import RayCaster
from .geometry import Pose, TriangleMesh
from .imgio import read_pfm, read_pgm, write_pfm, write_pgm
from .sampling import default_poisson_radius, poisson_disk_sample

log = logging.getLogger(__name__)


class PlanningError(RuntimeError):
    """Touch planning ran out of usable candidate contacts."""


@dataclass(frozen=True)
class SensorSpec:
    width_px: int = 320
    height_px: int = 240
    sensing_width: float = 0.020
    sensing_height: float = 0.015
    press_depth: float = 0.001
    max_indentation: float = 0.004
    min_contact_fraction: float = 0.05

    def __post_init__(self):
        pixel_aspect = self.width_px / self.height_px
        area_aspect = self.sensing_width / self.sensing_height
        if abs(pixel_aspect - area_aspect) > 1e-6 * area_aspect:
            raise ValueError(
                f"pixel aspect {pixel_aspect} != sensing aspect {area_aspect}")
        if self.press_depth > self.max_indentation:
            raise ValueError("press_depth must not exceed max_indentation")
        if not 0.0 < self.min_contact_fraction < 1.0:
            raise ValueError("min_contact_fraction must be in (0, 1)")

    @property
    def pitch_x(self) -> float:
        return self.sensing_width / self.width_px

    @property
    def pitch_y(self) -> float:
        return self.sensing_height / self.height_px

    def pixel_grid(self) -> tuple[np.ndarray, np.ndarray]:
        """Sensor-frame (x, y) coordinates of pixel centers, (H,W) each.

        x grows with column index; y shrinks with row index (image rows go
        top-down)."""
        xs = (np.arange(self.width_px) + 0.5) * self.pitch_x - self.sensing_width / 2
        ys = self.sensing_height / 2 - (np.arange(self.height_px) + 0.5) * self.pitch_y
        return np.meshgrid(xs, ys)

    def to_dict(self) -> dict:
        return {
            "width_px": self.width_px, "height_px": self.height_px,
            "sensing_width": self.sensing_width, "sensing_height": self.sensing_height,
            "press_depth": self.press_depth, "max_indentation": self.max_indentation,
            "min_contact_fraction": self.min_contact_fraction,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SensorSpec":
        return cls(**d)


@dataclass
class TactileObservation:
    """One touch: contact depth map + mask + the pressed gel-plane pose."""

    sensor_pose: Pose
    depth: np.ndarray  # (H,W), >= 0, measured from the pressed gel plane
    mask: np.ndarray   # (H,W) bool
    touch_id: int
    spec: SensorSpec

    def contact_fraction(self) -> float:
        return float(self.mask.mean())

    def validate(self) -> None:
        d = self.depth[self.mask]
        if d.size and (not np.isfinite(d).all() or d.min() < 0.0
                       or d.max() > self.spec.max_indentation + 1e-12):
            raise ValueError("contact depths outside [0, max_indentation]")
        if self.contact_fraction() < self.spec.min_contact_fraction:
            raise ValueError("observation below the minimum contact fraction")


def render_contact(caster: RayCaster, pose: Pose, spec: SensorSpec,
                   touch_id: int = 0) -> TactileObservation | None:
    """Ray-cast the contact depth map for a pressed gel-plane pose.

    Returns None (discard indicator) when the contact fraction is below the
    spec minimum.
    """
    px, py = spec.pixel_grid()
    h, w = px.shape
    local = np.stack([px, py, np.full_like(px, -spec.max_indentation)], axis=-1)
    origins = pose.apply(local.reshape(-1, 3))
    direction = pose.rotation[:, 2]
    dirs = np.broadcast_to(direction, origins.shape)
    t, face = caster.cast_batch(origins, dirs, t_min=0.0, t_max=spec.max_indentation)
    depth = np.where(face >= 0, spec.max_indentation - t, 0.0)
    depth = np.clip(depth, 0.0, spec.max_indentation).reshape(h, w)
    mask = depth > 0.0
    obs = TactileObservation(sensor_pose=pose, depth=depth, mask=mask,
                             touch_id=touch_id, spec=spec)
    if obs.contact_fraction() < spec.min_contact_fraction:
        return None
    return obs


def gel_filter(obs: TactileObservation, sigma_px: float) -> TactileObservation:
    """Gaussian-filter the depth inside the mask (sigma 0 is the identity)."""
    if sigma_px < 0:
        raise ValueError("sigma_px must be >= 0")
    if sigma_px == 0.0:
        return obs
    m = obs.mask.astype(np.float64)
    num = ndimage.gaussian_filter(obs.depth * m, sigma_px)
    den = ndimage.gaussian_filter(m, sigma_px)
    depth = np.zeros_like(obs.depth)
    inside = obs.mask & (den > 1e-12)
    depth[inside] = num[inside] / den[inside]
    depth = np.clip(depth, 0.0, obs.spec.max_indentation)
    return replace(obs, depth=depth, mask=depth > 0.0)


def _frame_from_axis(z_axis: np.ndarray, up_hint=(0.0, 0.0, 1.0)) -> np.ndarray:
    z = z_axis / np.linalg.norm(z_axis)
    up = np.asarray(up_hint, dtype=np.float64)
    x = np.cross(up, z)
    if np.linalg.norm(x) < 1e-8:
        x = np.cross(np.array([1.0, 0.0, 0.0]), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


def _central_patch_rays(pose: Pose, spec: SensorSpec, size: int = 5):
    px, py = spec.pixel_grid()
    h, w = px.shape
    r0 = max(0, h // 2 - size // 2)
    c0 = max(0, w // 2 - size // 2)
    sel_x = px[r0:r0 + size, c0:c0 + size].reshape(-1)
    sel_y = py[r0:r0 + size, c0:c0 + size].reshape(-1)
    local = np.stack([sel_x, sel_y, np.zeros_like(sel_x)], axis=-1)
    origins = pose.apply(local)
    dirs = np.broadcast_to(pose.rotation[:, 2], origins.shape)
    return origins, dirs


def plan_touches(mesh: TriangleMesh, k: int, spec: SensorSpec, seed: int,
                 caster: RayCaster | None = None,
                 retreat: float | None = None,
                 poisson_radius: float | None = None,
                 oversample_factor: float = 4.0) -> list[Pose]:
    """Plan k pressed sensor poses over the mesh.

    Candidate contacts come from Poisson-disk sampling; each sensor starts
    retracted along the radial vector from the origin, aligns its +z axis
    against the mean ray-cast normal of the central 5x5 pixel patch, advances
    to press_depth past first contact, and is kept only when the rendered
    contact fraction is sufficient.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    caster = caster or RayCaster(mesh)
    if retreat is None:
        retreat = 1.5 * float(np.linalg.norm(mesh.vertices, axis=1).max())
    if poisson_radius is None:
        poisson_radius = default_poisson_radius(mesh, k, oversample_factor)
    pool = poisson_disk_sample(mesh, poisson_radius, k, oversample_factor, seed)

    poses: list[Pose] = []
    for candidate in pool.points:
        p = candidate.position
        radial = p / (np.linalg.norm(p) + 1e-30)
        if np.linalg.norm(p) < 1e-9:
            radial = candidate.normal
        start = p + retreat * radial
        # first pass: look straight at the contact point to estimate the
        # local mean normal over the central pixel patch
        approach = (p - start)
        approach /= np.linalg.norm(approach)
        probe_pose = Pose(_frame_from_axis(approach), start)
        o, d = _central_patch_rays(probe_pose, spec)
        t, face = caster.cast_batch(o, d, t_max=4.0 * retreat)
        hits = face >= 0
        if hits.any():
            normals = caster.hit_normals(face[hits], np.asarray(d)[hits])
            mean_n = normals.mean(axis=0)
            if np.linalg.norm(mean_n) < 1e-9:
                mean_n = -approach
            mean_n /= np.linalg.norm(mean_n)
        else:
            mean_n = candidate.normal
        # align: sensor +z anti-parallel to the local surface normal
        z_axis = -mean_n
        aligned = Pose(_frame_from_axis(z_axis), p - retreat * z_axis)
        # advance: gel plane to press_depth past first contact in the footprint
        o, d = _central_patch_rays(aligned, spec, size=5)
        t, face = caster.cast_batch(o, d, t_max=4.0 * retreat)
        if not (face >= 0).any():
            continue
        t0 = float(t[face >= 0].min())
        pressed = Pose(aligned.rotation,
                       aligned.translation + z_axis * (t0 + spec.press_depth))
        obs = render_contact(caster, pressed, spec)
        if obs is None:
            continue
        poses.append(pressed)
        if len(poses) >= k:
            break
    if len(poses) < k:
        raise PlanningError(
            f"candidate pool exhausted: planned {len(poses)} of {k} touches")
    return poses


def simulate_touches(mesh: TriangleMesh, k: int, spec: SensorSpec, seed: int,
                     gel_sigma_px: float = 0.0,
                     caster: RayCaster | None = None,
                     **plan_kwargs) -> list[TactileObservation]:
    caster = caster or RayCaster(mesh)
    poses = plan_touches(mesh, k, spec, seed, caster=caster, **plan_kwargs)
    observations = []
    for i, pose in enumerate(poses):
        obs = render_contact(caster, pose, spec, touch_id=i)
        if obs is None:  # planner already validated; be defensive anyway
            continue
        if gel_sigma_px > 0:
            obs = gel_filter(obs, gel_sigma_px)
        obs.validate()
        observations.append(obs)
    return observations


# ---------------------------------------------------------------------------
# Observation directories
# ---------------------------------------------------------------------------


def save_observation(obs: TactileObservation, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_pfm(directory / "depth.pfm", obs.depth)
    write_pgm(directory / "mask.pgm", obs.mask)
    rt = np.concatenate([obs.sensor_pose.rotation.reshape(-1),
                         obs.sensor_pose.translation])
    np.savetxt(directory / "pose.txt", rt[None], fmt="%.17g")


def load_observation(directory, spec: SensorSpec, touch_id: int) -> TactileObservation:
    directory = Path(directory)
    depth = read_pfm(directory / "depth.pfm")
    mask = read_pgm(directory / "mask.pgm") >= 128
    rt = np.loadtxt(directory / "pose.txt").reshape(-1)
    pose = Pose(rt[:9].reshape(3, 3), rt[9:12])
    return TactileObservation(sensor_pose=pose, depth=depth, mask=mask,
                              touch_id=touch_id, spec=spec)


def save_observation_set(observations: list[TactileObservation], out_dir,
                         extra_manifest: dict | None = None) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for obs in observations:
        save_observation(obs, out_dir / f"touch_{obs.touch_id:03d}")
    manifest = {"count": len(observations),
                "spec": observations[0].spec.to_dict() if observations else None}
    manifest.update(extra_manifest or {})
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_observation_set(obs_dir) -> list[TactileObservation]:
    obs_dir = Path(obs_dir)
    manifest = json.loads((obs_dir / "manifest.json").read_text())
    spec = SensorSpec.from_dict(manifest["spec"])
    observations = []
    for i, sub in enumerate(sorted(obs_dir.glob("touch_*"))):
        observations.append(load_observation(sub, spec, touch_id=i))
    if not observations:
        raise FileNotFoundError(f"no touch_* directories under {obs_dir}")
    return observations
