"""Numba-compiled inner loops.

Everything here is deterministic: parallel kernels only ever write to
per-item output slots, and all scatter-accumulation kernels run serially in
index order.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

F8 = np.float64

# ---------------------------------------------------------------------------
# Trilinear grid interpolation over [-1, 1]^3
# ---------------------------------------------------------------------------


@njit(cache=True, inline="always")
def _cell_coords(x, y, z, res):
    """Map a domain point to (cell index, fractional coords) with clamping."""
    h = 2.0 / (res - 1)
    ux = (x + 1.0) / h
    uy = (y + 1.0) / h
    uz = (z + 1.0) / h
    ix = int(np.floor(ux))
    iy = int(np.floor(uy))
    iz = int(np.floor(uz))
    if ix < 0:
        ix = 0
    if ix > res - 2:
        ix = res - 2
    if iy < 0:
        iy = 0
    if iy > res - 2:
        iy = res - 2
    if iz < 0:
        iz = 0
    if iz > res - 2:
        iz = res - 2
    fx = ux - ix
    fy = uy - iy
    fz = uz - iz
    if fx < 0.0:
        fx = 0.0
    if fx > 1.0:
        fx = 1.0
    if fy < 0.0:
        fy = 0.0
    if fy > 1.0:
        fy = 1.0
    if fz < 0.0:
        fz = 0.0
    if fz > 1.0:
        fz = 1.0
    return ix, iy, iz, fx, fy, fz, h


@njit(cache=True, parallel=True)
def trilinear_eval(grid, pts, out):
    """out[i] += trilinear(grid, pts[i]). Accumulating lets levels sum."""
    res = grid.shape[0]
    for i in prange(pts.shape[0]):
        ix, iy, iz, fx, fy, fz, h = _cell_coords(pts[i, 0], pts[i, 1], pts[i, 2], res)
        c000 = grid[ix, iy, iz]
        c100 = grid[ix + 1, iy, iz]
        c010 = grid[ix, iy + 1, iz]
        c110 = grid[ix + 1, iy + 1, iz]
        c001 = grid[ix, iy, iz + 1]
        c101 = grid[ix + 1, iy, iz + 1]
        c011 = grid[ix, iy + 1, iz + 1]
        c111 = grid[ix + 1, iy + 1, iz + 1]
        c00 = c000 * (1 - fx) + c100 * fx
        c10 = c010 * (1 - fx) + c110 * fx
        c01 = c001 * (1 - fx) + c101 * fx
        c11 = c011 * (1 - fx) + c111 * fx
        c0 = c00 * (1 - fy) + c10 * fy
        c1 = c01 * (1 - fy) + c11 * fy
        out[i] += c0 * (1 - fz) + c1 * fz


@njit(cache=True, parallel=True)
def trilinear_eval_grad(grid, pts, out_val, out_grad):
    """Accumulate value and analytic spatial gradient of the interpolant."""
    res = grid.shape[0]
    for i in prange(pts.shape[0]):
        ix, iy, iz, fx, fy, fz, h = _cell_coords(pts[i, 0], pts[i, 1], pts[i, 2], res)
        c000 = grid[ix, iy, iz]
        c100 = grid[ix + 1, iy, iz]
        c010 = grid[ix, iy + 1, iz]
        c110 = grid[ix + 1, iy + 1, iz]
        c001 = grid[ix, iy, iz + 1]
        c101 = grid[ix + 1, iy, iz + 1]
        c011 = grid[ix, iy + 1, iz + 1]
        c111 = grid[ix + 1, iy + 1, iz + 1]
        gx = 1 - fx
        gy = 1 - fy
        gz = 1 - fz
        out_val[i] += (
            c000 * gx * gy * gz + c100 * fx * gy * gz + c010 * gx * fy * gz
            + c110 * fx * fy * gz + c001 * gx * gy * fz + c101 * fx * gy * fz
            + c011 * gx * fy * fz + c111 * fx * fy * fz
        )
        inv_h = 1.0 / h
        out_grad[i, 0] += inv_h * (
            (c100 - c000) * gy * gz + (c110 - c010) * fy * gz
            + (c101 - c001) * gy * fz + (c111 - c011) * fy * fz
        )
        out_grad[i, 1] += inv_h * (
            (c010 - c000) * gx * gz + (c110 - c100) * fx * gz
            + (c011 - c001) * gx * fz + (c111 - c101) * fx * fz
        )
        out_grad[i, 2] += inv_h * (
            (c001 - c000) * gx * gy + (c101 - c100) * fx * gy
            + (c011 - c010) * gx * fy + (c111 - c110) * fx * fy
        )


@njit(cache=True)
def trilinear_scatter_value(grid_grad, pts, coeff):
    """grid_grad[corners of pts[i]] += coeff[i] * value-weights. Serial."""
    res = grid_grad.shape[0]
    for i in range(pts.shape[0]):
        ix, iy, iz, fx, fy, fz, h = _cell_coords(pts[i, 0], pts[i, 1], pts[i, 2], res)
        c = coeff[i]
        gx = 1 - fx
        gy = 1 - fy
        gz = 1 - fz
        grid_grad[ix, iy, iz] += c * gx * gy * gz
        grid_grad[ix + 1, iy, iz] += c * fx * gy * gz
        grid_grad[ix, iy + 1, iz] += c * gx * fy * gz
        grid_grad[ix + 1, iy + 1, iz] += c * fx * fy * gz
        grid_grad[ix, iy, iz + 1] += c * gx * gy * fz
        grid_grad[ix + 1, iy, iz + 1] += c * fx * gy * fz
        grid_grad[ix, iy + 1, iz + 1] += c * gx * fy * fz
        grid_grad[ix + 1, iy + 1, iz + 1] += c * fx * fy * fz


@njit(cache=True)
def trilinear_scatter_grad(grid_grad, pts, coeff_vec):
    """grid_grad += sum_k coeff_vec[i,k] * d(weights)/dx_k at pts[i]. Serial."""
    res = grid_grad.shape[0]
    for i in range(pts.shape[0]):
        ix, iy, iz, fx, fy, fz, h = _cell_coords(pts[i, 0], pts[i, 1], pts[i, 2], res)
        inv_h = 1.0 / h
        cx = coeff_vec[i, 0] * inv_h
        cy = coeff_vec[i, 1] * inv_h
        cz = coeff_vec[i, 2] * inv_h
        gx = 1 - fx
        gy = 1 - fy
        gz = 1 - fz
        # d/dx contributions (sign -1 on the ix corners, +1 on ix+1)
        grid_grad[ix, iy, iz] += -cx * gy * gz - cy * gx * gz - cz * gx * gy
        grid_grad[ix + 1, iy, iz] += cx * gy * gz - cy * fx * gz - cz * fx * gy
        grid_grad[ix, iy + 1, iz] += -cx * fy * gz + cy * gx * gz - cz * gx * fy
        grid_grad[ix + 1, iy + 1, iz] += cx * fy * gz + cy * fx * gz - cz * fx * fy
        grid_grad[ix, iy, iz + 1] += -cx * gy * fz - cy * gx * fz + cz * gx * gy
        grid_grad[ix + 1, iy, iz + 1] += cx * gy * fz - cy * fx * fz + cz * fx * gy
        grid_grad[ix, iy + 1, iz + 1] += -cx * fy * fz + cy * gx * fz + cz * gx * fy
        grid_grad[ix + 1, iy + 1, iz + 1] += cx * fy * fz + cy * fx * fz + cz * fx * fy


# ---------------------------------------------------------------------------
# Ray-triangle intersection and BVH traversal
# ---------------------------------------------------------------------------

_MT_DET_EPS = 1e-14


@njit(cache=True, inline="always")
def _ray_triangle(ox, oy, oz, dx, dy, dz, v0, v1, v2):
    """Moller-Trumbore. Returns t (np.inf on miss)."""
    e1x = v1[0] - v0[0]
    e1y = v1[1] - v0[1]
    e1z = v1[2] - v0[2]
    e2x = v2[0] - v0[0]
    e2y = v2[1] - v0[1]
    e2z = v2[2] - v0[2]
    px = dy * e2z - dz * e2y
    py = dz * e2x - dx * e2z
    pz = dx * e2y - dy * e2x
    det = e1x * px + e1y * py + e1z * pz
    if det > -_MT_DET_EPS and det < _MT_DET_EPS:
        return np.inf
    inv_det = 1.0 / det
    tx = ox - v0[0]
    ty = oy - v0[1]
    tz = oz - v0[2]
    u = (tx * px + ty * py + tz * pz) * inv_det
    if u < 0.0 or u > 1.0:
        return np.inf
    qx = ty * e1z - tz * e1y
    qy = tz * e1x - tx * e1z
    qz = tx * e1y - ty * e1x
    v = (dx * qx + dy * qy + dz * qz) * inv_det
    if v < 0.0 or u + v > 1.0:
        return np.inf
    return (e2x * qx + e2y * qy + e2z * qz) * inv_det


@njit(cache=True, inline="always")
def _slab_test(ox, oy, oz, dx, dy, dz, lo, hi, t0, t1):
    """Ray-AABB overlap test on [t0, t1]. Axis-parallel rays (zero direction
    component) are handled explicitly to avoid 0*inf."""
    tmin = t0
    tmax = t1
    if dx != 0.0:
        inv = 1.0 / dx
        a = (lo[0] - ox) * inv
        b = (hi[0] - ox) * inv
        if a > b:
            a, b = b, a
        tmin = max(tmin, a)
        tmax = min(tmax, b)
    elif ox < lo[0] or ox > hi[0]:
        return False
    if dy != 0.0:
        inv = 1.0 / dy
        a = (lo[1] - oy) * inv
        b = (hi[1] - oy) * inv
        if a > b:
            a, b = b, a
        tmin = max(tmin, a)
        tmax = min(tmax, b)
    elif oy < lo[1] or oy > hi[1]:
        return False
    if dz != 0.0:
        inv = 1.0 / dz
        a = (lo[2] - oz) * inv
        b = (hi[2] - oz) * inv
        if a > b:
            a, b = b, a
        tmin = max(tmin, a)
        tmax = min(tmax, b)
    elif oz < lo[2] or oz > hi[2]:
        return False
    return tmin <= tmax


@njit(cache=True, parallel=True)
def bvh_cast(node_lo, node_hi, node_left, node_right, node_start, node_count,
             prim_order, tri_v0, tri_v1, tri_v2,
             origins, directions, t_min, t_max, out_t, out_face):
    """First-hit query for a batch of rays. Nearest t wins; ties go to the
    lowest face index. out_t = inf and out_face = -1 on miss."""
    n_rays = origins.shape[0]
    for r in prange(n_rays):
        ox = origins[r, 0]
        oy = origins[r, 1]
        oz = origins[r, 2]
        dx = directions[r, 0]
        dy = directions[r, 1]
        dz = directions[r, 2]
        best_t = np.inf
        best_f = -1
        stack = np.empty(64, dtype=np.int64)
        sp = 0
        stack[0] = 0
        sp = 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            # tiny slack keeps equal-t ties reachable so tie-breaking matches
            # the exhaustive reference
            limit = best_t + 1e-12 * (1.0 + abs(best_t))
            if t_max[r] < limit:
                limit = t_max[r]
            if not _slab_test(ox, oy, oz, dx, dy, dz,
                              node_lo[node], node_hi[node], t_min[r], limit):
                continue
            if node_left[node] < 0:
                start = node_start[node]
                for k in range(node_count[node]):
                    face = prim_order[start + k]
                    t = _ray_triangle(ox, oy, oz, dx, dy, dz,
                                      tri_v0[face], tri_v1[face], tri_v2[face])
                    if t >= t_min[r] and t <= t_max[r]:
                        if t < best_t or (t == best_t and face < best_f):
                            best_t = t
                            best_f = face
            else:
                stack[sp] = node_right[node]
                sp += 1
                stack[sp] = node_left[node]
                sp += 1
        out_t[r] = best_t
        out_face[r] = best_f


@njit(cache=True, parallel=True)
def brute_force_cast(tri_v0, tri_v1, tri_v2, origins, directions, t_min, t_max,
                     out_t, out_face):
    """Exhaustive per-triangle reference with the same tie-breaking."""
    n_rays = origins.shape[0]
    n_tris = tri_v0.shape[0]
    for r in prange(n_rays):
        best_t = np.inf
        best_f = -1
        for face in range(n_tris):
            t = _ray_triangle(origins[r, 0], origins[r, 1], origins[r, 2],
                              directions[r, 0], directions[r, 1], directions[r, 2],
                              tri_v0[face], tri_v1[face], tri_v2[face])
            if t >= t_min[r] and t <= t_max[r]:
                if t < best_t or (t == best_t and face < best_f):
                    best_t = t
                    best_f = face
        out_t[r] = best_t
        out_face[r] = best_f


# ---------------------------------------------------------------------------
# Fixed-step sign-change search along rays (one grid level at a time)
# ---------------------------------------------------------------------------


@njit(cache=True, inline="always")
def _stack_eval(stack, res_arr, n_active, x, y, z):
    total = 0.0
    for l in range(n_active):
        res = res_arr[l]
        ix, iy, iz, fx, fy, fz, h = _cell_coords(x, y, z, res)
        c00 = stack[l, ix, iy, iz] * (1 - fx) + stack[l, ix + 1, iy, iz] * fx
        c10 = stack[l, ix, iy + 1, iz] * (1 - fx) + stack[l, ix + 1, iy + 1, iz] * fx
        c01 = stack[l, ix, iy, iz + 1] * (1 - fx) + stack[l, ix + 1, iy, iz + 1] * fx
        c11 = (stack[l, ix, iy + 1, iz + 1] * (1 - fx)
               + stack[l, ix + 1, iy + 1, iz + 1] * fx)
        c0 = c00 * (1 - fy) + c10 * fy
        c1 = c01 * (1 - fy) + c11 * fy
        total += c0 * (1 - fz) + c1 * fz
    return total


@njit(cache=True, parallel=True)
def march_rays(stack, res_arr, n_active, origins, dirs, t0, t1, valid,
               n_samples, out_hit, out_lo, out_hi, out_flo, out_fhi,
               out_min_f, out_t_min):
    """Fixed-step sign-change search along each ray over the level stack.

    Records the bracketing interval of the first sign change; misses leave
    out_hit false. The running minimum value and its depth are tracked for
    every ray (for misses this is the differentiable closest approach).
    """
    n = origins.shape[0]
    for r in prange(n):
        out_hit[r] = False
        out_min_f[r] = np.inf
        out_t_min[r] = 0.0
        if not valid[r]:
            continue
        step = (t1[r] - t0[r]) / (n_samples - 1)
        ox = origins[r, 0]
        oy = origins[r, 1]
        oz = origins[r, 2]
        dx = dirs[r, 0]
        dy = dirs[r, 1]
        dz = dirs[r, 2]
        t = t0[r]
        f_prev = _stack_eval(stack, res_arr, n_active,
                             ox + t * dx, oy + t * dy, oz + t * dz)
        out_min_f[r] = f_prev
        out_t_min[r] = t
        prev_pos = f_prev > 0.0
        for k in range(1, n_samples):
            t = t0[r] + k * step
            f = _stack_eval(stack, res_arr, n_active,
                            ox + t * dx, oy + t * dy, oz + t * dz)
            if f < out_min_f[r]:
                out_min_f[r] = f
                out_t_min[r] = t
            pos = f > 0.0
            if pos != prev_pos:
                out_hit[r] = True
                out_lo[r] = t - step
                out_hi[r] = t
                out_flo[r] = f_prev
                out_fhi[r] = f
                break
            f_prev = f
            prev_pos = pos


@njit(cache=True, parallel=True)
def refine_crossings(stack, res_arr, n_active, origins, dirs, hit,
                     lo, hi, f_lo, f_hi, tol, max_iter, out_t):
    """Bracketed secant/bisection refinement of each recorded sign change."""
    n = origins.shape[0]
    for r in prange(n):
        if not hit[r]:
            out_t[r] = 0.0
            continue
        a = lo[r]
        b = hi[r]
        fa = f_lo[r]
        fb = f_hi[r]
        t = a
        for _ in range(max_iter):
            df = fb - fa
            if abs(df) > 1e-300:
                mid = a - fa * (b - a) / df
            else:
                mid = 0.5 * (a + b)
            if mid <= a or mid >= b:
                mid = 0.5 * (a + b)
            x = origins[r, 0] + mid * dirs[r, 0]
            y = origins[r, 1] + mid * dirs[r, 1]
            z = origins[r, 2] + mid * dirs[r, 2]
            fm = _stack_eval(stack, res_arr, n_active, x, y, z)
            t = mid
            if abs(fm) < tol:
                break
            if (fm > 0.0) == (fa > 0.0):
                a = mid
                fa = fm
            else:
                b = mid
                fb = fm
        out_t[r] = t
