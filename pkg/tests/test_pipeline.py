import numpy as np
import pytest

from tacshape.bvh import RayCaster
from tacshape.evalmetrics import chamfer
from tacshape.geometry import normalize_mesh
from tacshape.guidance import TemplateMockBackend, ZeroBackend
from tacshape.integration import to_virtual_observation
from tacshape.pipeline import (PipelineConfig, TrainState, default_config,
                               load_config, stage1_train, stage2_refine)
from tacshape.sampling import sample_surface_points
from tacshape.shapes import make_icosphere
from tacshape.tetra import init_tet_from_field, marching_tetrahedra
from tacshape.touchsim import SensorSpec, simulate_touches

DESK_SPEC = SensorSpec(width_px=48, height_px=36, sensing_width=0.28,
                       sensing_height=0.21, press_depth=0.03,
                       max_indentation=0.06)


@pytest.fixture(scope="module")
def sphere_vobs():
    mesh, _ = normalize_mesh(make_icosphere(0.5, 4))
    caster = RayCaster(mesh)
    obs = simulate_touches(mesh, 12, DESK_SPEC, seed=0, caster=caster)
    return mesh, [to_virtual_observation(o, standoff=0.25) for o in obs]


def tiny_config(total=30, warmup=20, seed=3) -> PipelineConfig:
    cfg = default_config("desk")
    cfg.seed = seed
    cfg.stage1.total_steps = total
    cfg.stage1.warmup_steps = warmup
    cfg.stage1.ray_batch = 512
    cfg.stage1.samples_per_ray = 192
    cfg.stage1.grid_resolutions = (8, 16, 32)
    cfg.stage1.sds_resolution = 24
    cfg.stage1.sds_batch = 2
    cfg.stage1.unlock_start = warmup
    cfg.stage1.unlock_every = 5
    cfg.stage2.steps = 8
    cfg.stage2.tet_resolution = 24
    cfg.stage2.sds_resolution = 32
    cfg.stage2.sds_batch = 1
    return cfg


def test_config_profiles():
    sim = default_config("simulation")
    assert sim.weights1.w_normal_start == 0.025
    assert sim.weights1.w_normal_end == 1.0
    assert sim.stage2.iso == -0.03
    real = default_config("real")
    assert real.weights1.w_normal_start == 0.1
    assert real.weights1.w_normal_end == 4.0
    assert real.stage2.iso == 0.0
    with pytest.raises(ValueError):
        default_config("bogus")


def test_config_defaults_match_schedules():
    sim = default_config("simulation")
    assert sim.stage1.warmup_steps == 1000
    assert sim.stage1.total_steps == 7000
    assert sim.stage1.ray_batch == 16384
    assert sim.stage1.samples_per_ray == 512
    assert sim.stage1.sds_batch == 8
    assert sim.stage1.sds_resolution == 64
    assert sim.stage1.unlock_start == 1000 and sim.stage1.unlock_every == 400
    assert sim.stage1.lr == pytest.approx(1e-2)
    assert sim.stage2.lr == pytest.approx(1e-3)
    assert sim.stage2.sds_resolution == 512 and sim.stage2.sds_batch == 4
    assert sim.stage2.observation_batch == 32


def test_config_file_parsing(tmp_path):
    text = """
# comment
profile=real
seed=42
prompt=a mug
stage1.total_steps=123
stage1.grid_resolutions=8,16
weights1.w_depth=2.5
weights2.w_nc=0.125
sds.guidance_scale=7.5
"""
    path = tmp_path / "cfg.txt"
    path.write_text(text)
    cfg = load_config(path)
    assert cfg.profile == "real"
    assert cfg.seed == 42
    assert cfg.prompt == "a mug"
    assert cfg.stage1.total_steps == 123
    assert cfg.stage1.grid_resolutions == (8, 16)
    assert cfg.weights1.w_depth == 2.5
    assert cfg.weights2.w_nc == 0.125
    assert cfg.guidance_scale == 7.5


def test_config_unknown_key_named(tmp_path):
    path = tmp_path / "cfg.txt"
    path.write_text("stage1.bogus_key=5\n")
    with pytest.raises(KeyError) as err:
        load_config(path)
    assert "stage1.bogus_key" in str(err.value)


def test_warmup_guidance_cadence(sphere_vobs):
    mesh, vobs = sphere_vobs
    cfg = tiny_config(total=25, warmup=20)
    backend = ZeroBackend()
    field, report = stage1_train(cfg, vobs, backend)
    assert backend.request_count == (25 - 20) * cfg.stage1.sds_batch
    for row in report.history:
        if row["step"] < 20:
            assert "sds_requests" not in row
        else:
            assert row["sds_requests"] == cfg.stage1.sds_batch


def test_stage1_requires_observations():
    cfg = tiny_config()
    with pytest.raises(ValueError):
        stage1_train(cfg, [], ZeroBackend())


def test_stage1_deterministic(sphere_vobs):
    mesh, vobs = sphere_vobs
    backend = TemplateMockBackend(mesh)
    f1, _ = stage1_train(tiny_config(), vobs, backend)
    f2, _ = stage1_train(tiny_config(), vobs, backend)
    assert f1.dumps() == f2.dumps()


def test_stage1_loss_decreases(sphere_vobs):
    mesh, vobs = sphere_vobs
    cfg = tiny_config(total=120, warmup=120)
    cfg.stage1.unlock_start = 40
    field, report = stage1_train(cfg, vobs, ZeroBackend())
    # compare after the surface has formed (the first steps are all misses)
    early = np.mean([r["depth"] + r["normal"] + r["miss"]
                     for r in report.history[18:32]])
    late = np.mean([r["depth"] + r["normal"] + r["miss"]
                    for r in report.history[-10:]])
    assert late < 0.5 * early


def test_checkpoint_resume_matches_straight_run(tmp_path, sphere_vobs):
    mesh, vobs = sphere_vobs
    backend = TemplateMockBackend(mesh)

    cfg_a = tiny_config(total=30, warmup=22)
    f_straight, _ = stage1_train(cfg_a, vobs, backend)

    # same config with periodic checkpoints; resume the step-15 snapshot
    cfg_b = tiny_config(total=30, warmup=22)
    cfg_b.stage1.checkpoint_every = 15
    stage1_train(cfg_b, vobs, backend, out_dir=tmp_path)
    state = TrainState.load(tmp_path / "stage1_step000015.ckpt")
    assert state.step == 15
    cfg_c = tiny_config(total=30, warmup=22)
    f_resumed, _ = stage1_train(cfg_c, vobs, backend, state=state)
    assert f_resumed.dumps() == f_straight.dumps()


def test_checkpoint_corrupt_rejected(tmp_path, sphere_vobs):
    mesh, vobs = sphere_vobs
    cfg = tiny_config(total=4, warmup=10)
    stage1_train(cfg, vobs, ZeroBackend(), out_dir=tmp_path)
    path = tmp_path / "stage1_final.ckpt"
    data = bytearray(path.read_bytes())
    data[:4] = b"NOPE"
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(bytes(data))
    with pytest.raises(ValueError):
        TrainState.load(bad)
    truncated = tmp_path / "trunc.ckpt"
    truncated.write_bytes(path.read_bytes()[:-100])
    with pytest.raises(ValueError):
        TrainState.load(truncated)


def test_checkpoint_size_scales_with_parameters(tmp_path, sphere_vobs):
    mesh, vobs = sphere_vobs
    sizes = {}
    for res in ((8,), (8, 16)):
        cfg = tiny_config(total=2, warmup=10)
        cfg.stage1.grid_resolutions = res
        cfg.stage1.init_active_levels = 1
        out = tmp_path / f"r{len(res)}"
        out.mkdir()
        stage1_train(cfg, vobs, ZeroBackend(), out_dir=out)
        sizes[res] = (out / "stage1_final.ckpt").stat().st_size
    # parameters triple (field + two moments): 16^3 adds 3*4096 doubles
    grown = sizes[(8, 16)] - sizes[(8,)]
    assert abs(grown - 3 * (16 ** 3) * 8) < 4096


def test_stage2_zero_steps_is_initialization(sphere_vobs):
    mesh, vobs = sphere_vobs
    cfg = tiny_config()
    cfg.stage2.steps = 0
    field, _ = stage1_train(tiny_config(total=40, warmup=40), vobs, ZeroBackend())
    tet, out_mesh, report = stage2_refine(field, cfg, vobs, ZeroBackend())
    ref = marching_tetrahedra(init_tet_from_field(field, cfg.stage2.tet_resolution,
                                                  iso=cfg.stage2.iso))
    assert np.array_equal(out_mesh.vertices, ref.vertices)
    assert np.array_equal(out_mesh.faces, ref.faces)


def test_stage2_fits_observations_and_counts_requests(sphere_vobs):
    # (global non-degradation under guided stage-1 input is asserted by the
    # acceptance suite; here stage 2 starts from a tactile-only field and must
    # still fit the observations and keep its request accounting straight)
    mesh, vobs = sphere_vobs
    cfg = tiny_config(total=140, warmup=140, seed=5)
    cfg.stage1.unlock_start = 50
    cfg.stage1.unlock_every = 30
    field, _ = stage1_train(cfg, vobs, ZeroBackend())
    cfg.stage2.steps = 30
    cfg.stage2.tet_resolution = 32
    backend = TemplateMockBackend(mesh)
    tet, final_mesh, report = stage2_refine(field, cfg, vobs, backend)
    depth_first = report.history[0]["depth"]
    depth_last = np.mean([r["depth"] for r in report.history[-5:]])
    assert depth_last < depth_first * 0.75
    assert final_mesh.n_faces > 0
    assert np.abs(tet.dv).max() <= 0.45 * tet.spacing + 1e-12
    assert report.guidance_requests == cfg.stage2.steps * cfg.stage2.sds_batch


def test_stage2_deterministic(sphere_vobs):
    mesh, vobs = sphere_vobs
    backend = TemplateMockBackend(mesh)
    cfg0 = tiny_config(total=25, warmup=25)
    field, _ = stage1_train(cfg0, vobs, ZeroBackend())
    m = []
    for _ in range(2):
        cfg = tiny_config()
        cfg.stage2.steps = 6
        _, out_mesh, _ = stage2_refine(field, cfg, vobs, backend)
        m.append(out_mesh)
    assert np.array_equal(m[0].vertices, m[1].vertices)
    assert np.array_equal(m[0].faces, m[1].faces)
