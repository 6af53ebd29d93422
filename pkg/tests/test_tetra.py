import numpy as np
import pytest

from tacshape.field import GridSDF
from tacshape.shapes import sphere_sdf
from tacshape.tetra import TetGrid, init_tet_from_field, marching_tetrahedra


def manifold_stats(mesh):
    e = np.concatenate([mesh.faces[:, [0, 1]], mesh.faces[:, [1, 2]],
                        mesh.faces[:, [2, 0]]])
    e_sorted = np.sort(e, axis=1)
    uniq, counts = np.unique(e_sorted, axis=0, return_counts=True)
    euler = mesh.n_vertices - len(uniq) + mesh.n_faces
    return np.all(counts == 2), euler


def sphere_tet(resolution=32, iso=0.0, radius=0.5):
    tet = TetGrid(resolution=resolution, iso=iso)
    tet.s[:] = sphere_sdf(tet.vertices, radius)
    return tet


def test_sphere_watertight_euler_radii():
    tet = sphere_tet(64)
    mesh = marching_tetrahedra(tet)
    manifold, euler = manifold_stats(mesh)
    assert manifold
    assert euler == 2
    r = np.linalg.norm(mesh.vertices, axis=1)
    h = tet.spacing
    assert r.min() >= 0.5 - h and r.max() <= 0.5 + h


def test_all_positive_is_empty():
    tet = TetGrid(resolution=8)
    tet.s[:] = 1.0
    assert marching_tetrahedra(tet) is None


def test_all_negative_is_empty_level_set_inside_grid():
    tet = TetGrid(resolution=8)
    tet.s[:] = -1.0
    assert marching_tetrahedra(tet) is None


def test_single_tet_one_negative_corner():
    # carve one tet out of a tiny grid: make exactly one lattice vertex negative
    tet = TetGrid(resolution=2)
    tet.s[:] = 1.0
    corner = 0  # lattice vertex at (-1,-1,-1)
    tet.s[corner] = -0.5
    mesh, info = marching_tetrahedra(tet, with_info=True)
    # crossing parameter on each cut edge: t = s_neg / (s_neg - s_pos)
    t_expected = -0.5 / (-0.5 - 1.0)
    assert np.allclose(info.t, t_expected) or np.allclose(1 - info.t, t_expected)
    # interpolated field value at the output vertices equals the level
    s_interp = tet.s[info.edge_a] + info.t * (tet.s[info.edge_b] - tet.s[info.edge_a])
    assert np.abs(s_interp - (-tet.iso)).max() < 1e-9


def test_iso_containment_sphere():
    mesh0 = marching_tetrahedra(sphere_tet(64, iso=0.0))
    mesh_neg = marching_tetrahedra(sphere_tet(64, iso=-0.03))
    r0 = np.linalg.norm(mesh0.vertices, axis=1)
    rn = np.linalg.norm(mesh_neg.vertices, axis=1)
    # the -0.03 surface strictly encloses the 0.0 surface
    assert rn.min() > r0.max() - 2.0 / 64
    assert rn.mean() > r0.mean()
    assert rn.min() > 0.5 and r0.max() < 0.53 + 1e-9


def test_offsets_move_vertices():
    tet = sphere_tet(16)
    mesh0, info0 = marching_tetrahedra(tet, with_info=True)
    tet.dv[:] = 0.3 * tet.spacing
    mesh1, _ = marching_tetrahedra(tet, with_info=True)
    assert not np.allclose(mesh0.vertices, mesh1.vertices)


def test_clamp_offsets():
    tet = TetGrid(resolution=8)
    tet.dv[:] = 1.0
    tet.clamp_offsets()
    assert np.abs(tet.dv).max() <= 0.45 * tet.spacing + 1e-15


def test_init_from_field(sphere_field):
    tet = init_tet_from_field(sphere_field, 16, iso=0.0)
    expected = sphere_sdf(tet.vertices, 0.5)
    # the SDF cusp at the origin is not representable by trilinear cells;
    # compare away from it
    away = np.linalg.norm(tet.vertices, axis=1) > 0.15
    assert np.abs(tet.s - expected)[away].max() < 5e-3
    assert np.all(tet.dv == 0.0)


def test_init_from_zero_field():
    f = GridSDF(resolutions=(8,), active_levels=1)
    tet = init_tet_from_field(f, 8)
    assert np.all(tet.s == 0.0)


def test_vertex_position_derivatives_match_fd():
    rng = np.random.default_rng(0)
    tet = TetGrid(resolution=6)
    tet.s[:] = sphere_sdf(tet.vertices, 0.55) + rng.normal(scale=0.02, size=len(tet.s))
    tet.dv[:] = rng.normal(scale=0.05 * tet.spacing, size=tet.dv.shape)
    mesh, info = marching_tetrahedra(tet, with_info=True)
    # random linear functional of the output vertex positions
    W = rng.normal(size=mesh.vertices.shape)
    grad_s = np.zeros_like(tet.s)
    grad_dv = np.zeros_like(tet.dv)
    info.backprop_vertices(W, tet, grad_s, grad_dv)

    h = 1e-6
    # distances: perturb vertices that take part in crossing edges
    involved = np.unique(np.concatenate([info.edge_a, info.edge_b]))
    for vid in rng.choice(involved, size=30, replace=False):
        orig = tet.s[vid]
        tet.s[vid] = orig + h
        mp, ip = marching_tetrahedra(tet, with_info=True)
        up = float(np.sum(W * mp.vertices))
        tet.s[vid] = orig - h
        mm, im = marching_tetrahedra(tet, with_info=True)
        dn = float(np.sum(W * mm.vertices))
        tet.s[vid] = orig
        if mp.n_vertices != mesh.n_vertices or mm.n_vertices != mesh.n_vertices:
            continue  # topology change under perturbation; derivative undefined
        fd = (up - dn) / (2 * h)
        an = grad_s[vid]
        assert abs(fd - an) <= 1e-5 + 1e-5 * max(abs(fd), abs(an))
    # offsets
    for vid in rng.choice(involved, size=10, replace=False):
        for axis in range(3):
            orig = tet.dv[vid, axis]
            tet.dv[vid, axis] = orig + h
            mp, _ = marching_tetrahedra(tet, with_info=True)
            up = float(np.sum(W * mp.vertices))
            tet.dv[vid, axis] = orig - h
            mm, _ = marching_tetrahedra(tet, with_info=True)
            dn = float(np.sum(W * mm.vertices))
            tet.dv[vid, axis] = orig
            if mp.n_vertices != mesh.n_vertices or mm.n_vertices != mesh.n_vertices:
                continue
            fd = (up - dn) / (2 * h)
            an = grad_dv[vid, axis]
            assert abs(fd - an) <= 1e-5 + 1e-5 * max(abs(fd), abs(an))


def test_tet_checkpoint_roundtrip(tmp_path):
    tet = sphere_tet(8, iso=-0.03)
    tet.dv[:] = np.random.default_rng(1).normal(scale=0.01, size=tet.dv.shape)
    path = tmp_path / "t.tet"
    tet.save(path)
    back = TetGrid.load(path)
    assert back.resolution == tet.resolution
    assert back.iso == tet.iso
    assert np.array_equal(back.s, tet.s)
    assert np.array_equal(back.dv, tet.dv)


def test_tet_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.tet"
    path.write_bytes(b"ZZZZ" + b"\0" * 32)
    with pytest.raises(ValueError):
        TetGrid.load(path)
