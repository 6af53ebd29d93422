"""Trainable multi-resolution signed-distance grid over [-1, 1]^3.

The field value at a point is the sum of trilinear interpolations of a stack
of dense grids (coarse to fine). The representation is chosen so that value,
spatial gradient, spatial Hessian, and the gradient with respect to grid
parameters (8 nodes per level) are all available in closed form without an
autodiff engine. Sign convention: negative inside the object.

Progressive training unlocks one level at a time; inactive levels do not
contribute to the value and receive no gradients.
"""

from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass

import numpy as np

from . import kernels

log = logging.getLogger(__name__)

FIELD_MAGIC = b"TSF1"
FIELD_VERSION = 1


@dataclass
class FieldSample:
    """Value and analytic spatial gradient at query points."""

    value: np.ndarray
    spatial_grad: np.ndarray


class GridSDF:
    def __init__(self, resolutions=(16, 32, 64, 128), active_levels: int = 2):
        self.resolutions = tuple(int(r) for r in resolutions)
        if any(r < 2 for r in self.resolutions):
            raise ValueError("grid resolution must be >= 2")
        self.levels = [np.zeros((r, r, r), dtype=np.float64) for r in self.resolutions]
        self.active_levels = min(max(1, int(active_levels)), len(self.levels))
        self._init_active = self.active_levels
        self.clamp_warnings = 0

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @property
    def finest_active_resolution(self) -> int:
        return self.resolutions[self.active_levels - 1]

    @property
    def finest_cell_size(self) -> float:
        return 2.0 / (self.resolutions[-1] - 1)

    def n_parameters(self) -> int:
        return sum(g.size for g in self.levels)

    def level_nodes(self, level: int) -> np.ndarray:
        """(R,R,R,3) node coordinates of one level."""
        r = self.resolutions[level]
        axis = np.linspace(-1.0, 1.0, r)
        gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1)

    def init_from_callable(self, fn) -> None:
        """Load fn(points)->values into the stack: coarsest level takes the
        raw samples, finer levels take interpolation residuals so the full sum
        reproduces fn at finest-level accuracy."""
        for lvl in range(self.n_levels):
            nodes = self.level_nodes(lvl).reshape(-1, 3)
            target = np.asarray(fn(nodes), dtype=np.float64)
            if lvl == 0:
                self.levels[0][:] = target.reshape(self.levels[0].shape)
            else:
                current = np.zeros(len(nodes))
                for prev in range(lvl):
                    kernels.trilinear_eval(self.levels[prev], nodes, current)
                self.levels[lvl][:] = (target - current).reshape(self.levels[lvl].shape)

    def init_constant(self, value: float) -> None:
        for g in self.levels:
            g[:] = 0.0
        self.levels[0][:] = value

    def _check_domain(self, pts: np.ndarray) -> None:
        n_out = int((np.abs(pts) > 1.0).any(axis=-1).sum())
        if n_out:
            if self.clamp_warnings == 0:
                log.warning("field queried outside [-1,1]^3; clamping (%d points)", n_out)
            self.clamp_warnings += n_out

    def level_stack(self) -> tuple[np.ndarray, np.ndarray]:
        """Active levels padded into one (L, R, R, R) array for the march
        kernel. Rebuilt per call: parameters mutate between optimizer steps."""
        r_max = self.resolutions[self.active_levels - 1]
        stack = np.zeros((self.active_levels, r_max, r_max, r_max))
        for lvl in range(self.active_levels):
            r = self.resolutions[lvl]
            stack[lvl, :r, :r, :r] = self.levels[lvl]
        res_arr = np.array(self.resolutions[:self.active_levels], dtype=np.int64)
        return stack, res_arr

    def eval(self, points: np.ndarray) -> FieldSample:
        """Value and spatial gradient at (N,3) or (3,) points (clamped to the domain)."""
        pts = np.ascontiguousarray(points, dtype=np.float64)
        single = pts.ndim == 1
        pts = pts.reshape(-1, 3)
        self._check_domain(pts)
        vals = np.zeros(len(pts))
        grads = np.zeros((len(pts), 3))
        for lvl in range(self.active_levels):
            kernels.trilinear_eval_grad(self.levels[lvl], pts, vals, grads)
        if single:
            return FieldSample(value=vals[0], spatial_grad=grads[0])
        return FieldSample(value=vals, spatial_grad=grads)

    def eval_values(self, points: np.ndarray) -> np.ndarray:
        pts = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        self._check_domain(pts)
        vals = np.zeros(len(pts))
        for lvl in range(self.active_levels):
            kernels.trilinear_eval(self.levels[lvl], pts, vals)
        return vals

    def hessian(self, points: np.ndarray) -> np.ndarray:
        """Analytic spatial Hessian (N,3,3) of the interpolant.

        Within a cell the diagonal terms vanish (the interpolant is linear in
        each coordinate separately); the mixed terms are the cross-derivative
        weights. Summed over active levels.
        """
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        H = np.zeros((len(pts), 3, 3))
        for lvl in range(self.active_levels):
            res = self.resolutions[lvl]
            h = 2.0 / (res - 1)
            u = np.clip((pts + 1.0) / h, 0.0, res - 1 - 1e-12)
            idx = np.minimum(u.astype(np.int64), res - 2)
            f = u - idx
            g = self.levels[lvl]
            ix, iy, iz = idx[:, 0], idx[:, 1], idx[:, 2]
            c = np.empty((len(pts), 2, 2, 2))
            for a in range(2):
                for b in range(2):
                    for d in range(2):
                        c[:, a, b, d] = g[ix + a, iy + b, iz + d]
            wx = np.stack([1 - f[:, 0], f[:, 0]], axis=1)
            wy = np.stack([1 - f[:, 1], f[:, 1]], axis=1)
            wz = np.stack([1 - f[:, 2], f[:, 2]], axis=1)
            dw = np.array([-1.0, 1.0])
            # mixed second derivatives, e.g. d2f/dxdy = sum c * wx' * wy' * wz
            hxy = np.einsum("nabd,a,b,nd->n", c, dw, dw, wz) / h**2
            hxz = np.einsum("nabd,a,nb,d->n", c, dw, wy, dw) / h**2
            hyz = np.einsum("nabd,na,b,d->n", c, wx, dw, dw) / h**2
            H[:, 0, 1] += hxy
            H[:, 1, 0] += hxy
            H[:, 0, 2] += hxz
            H[:, 2, 0] += hxz
            H[:, 1, 2] += hyz
            H[:, 2, 1] += hyz
        return H

    # -- gradient accumulation ------------------------------------------------

    def zero_grads(self) -> list[np.ndarray]:
        return [np.zeros_like(g) for g in self.levels]

    def scatter_value_grad(self, grads: list[np.ndarray], points: np.ndarray,
                           coeff: np.ndarray, max_levels: int | None = None) -> None:
        """grads += coeff[i] * d(value at points[i])/d(parameters).

        max_levels restricts the scatter to the coarsest k levels (used by
        low-frequency terms such as silhouette sculpting)."""
        pts = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        coeff = np.ascontiguousarray(coeff, dtype=np.float64).reshape(-1)
        top = self.active_levels if max_levels is None else min(self.active_levels,
                                                                max_levels)
        for lvl in range(top):
            kernels.trilinear_scatter_value(grads[lvl], pts, coeff)

    def scatter_spatial_grad(self, grads: list[np.ndarray], points: np.ndarray,
                             coeff_vec: np.ndarray) -> None:
        """grads += sum_k coeff_vec[i,k] * d(df/dx_k at points[i])/d(parameters)."""
        pts = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        cv = np.ascontiguousarray(coeff_vec, dtype=np.float64).reshape(-1, 3)
        for lvl in range(self.active_levels):
            kernels.trilinear_scatter_grad(grads[lvl], pts, cv)

    # -- progressive unlocking -----------------------------------------------

    def unlock_level(self, step: int, start_step: int, every: int) -> bool:
        """Activate levels per schedule: one extra level at start_step and one
        more every `every` steps until all are active. Returns True when a
        level unlocked at this call."""
        if step < start_step:
            return False
        due = 1 + (step - start_step) // max(1, every)
        target = min(self.n_levels, self._init_active + due)
        changed = target > self.active_levels
        self.active_levels = max(self.active_levels, target)
        return changed

    def mark_unlock_baseline(self) -> None:
        """Record the current activation count as the schedule baseline."""
        self._init_active = self.active_levels

    # -- serialization ---------------------------------------------------------

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.dumps())

    def dumps(self) -> bytes:
        buf = io.BytesIO()
        buf.write(FIELD_MAGIC)
        buf.write(struct.pack("<III", FIELD_VERSION, self.n_levels, self.active_levels))
        for r in self.resolutions:
            buf.write(struct.pack("<I", r))
        for g in self.levels:
            # stored x-fastest: serialize as [z, y, x] row-major
            buf.write(g.transpose(2, 1, 0).astype("<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def load(cls, path) -> "GridSDF":
        with open(path, "rb") as fh:
            return cls.loads(fh.read())

    @classmethod
    def loads(cls, data: bytes) -> "GridSDF":
        buf = io.BytesIO(data)
        magic = buf.read(4)
        if magic != FIELD_MAGIC:
            raise ValueError(f"not a field checkpoint (magic {magic!r})")
        version, n_levels, active = struct.unpack("<III", buf.read(12))
        if version != FIELD_VERSION:
            raise ValueError(f"unsupported field checkpoint version {version}")
        resolutions = [struct.unpack("<I", buf.read(4))[0] for _ in range(n_levels)]
        field = cls(resolutions=resolutions, active_levels=active)
        for lvl, r in enumerate(resolutions):
            raw = buf.read(8 * r * r * r)
            if len(raw) != 8 * r * r * r:
                raise ValueError("truncated field checkpoint")
            arr = np.frombuffer(raw, dtype="<f8").reshape(r, r, r)
            field.levels[lvl][:] = arr.transpose(2, 1, 0)
        return field
