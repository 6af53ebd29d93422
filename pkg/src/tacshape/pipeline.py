"""Two-stage training orchestration.

Stage 1 optimizes the multi-resolution grid field: tactile-only warm-up,
then joint tactile + guidance steps with progressive level unlocking and the
normal-weight ramp. Stage 2 initializes a tetrahedral grid from the field
and refines per-vertex distances and offsets against mesh renders.

All randomness flows through a single per-run generator held in TrainState,
so fixed seeds plus a deterministic backend reproduce runs parameter-for-
parameter, including across checkpoint/resume boundaries.
"""

from __future__ import annotations

import io
import json
import logging
import struct
from dataclasses import dataclass, field as dc_field, fields
from pathlib import Path

import numpy as np

from .field import GridSDF
from .geometry import TriangleMesh
from .guidance import GuidanceBackend
from .integration import VirtualObservation, observation_rays
from .losses import (LossWeights, RayBatch, SdsBatch, depth_normal_loss,
                     eikonal_loss, freespace_loss, grid_smoothness_loss,
                     normal_consistency_loss, sdf_loss, sds_step_field,
                     sds_step_mesh)
from .render import raycast_mesh, sample_view
from .tetra import TetGrid, init_tet_from_field, marching_tetrahedra
from .bvh import RayCaster

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"TGCK"
CHECKPOINT_VERSION = 1


@dataclass
class Stage1Config:
    warmup_steps: int = 1000
    total_steps: int = 7000
    ray_batch: int = 16384
    samples_per_ray: int = 512
    sds_resolution: int = 64
    sds_batch: int = 8
    lr: float = 1e-2
    grid_resolutions: tuple[int, ...] = (16, 32, 64, 128)
    init_active_levels: int = 2
    unlock_start: int = 1000
    unlock_every: int = 400
    band_samples: int = 8
    freespace_samples: int = 8
    init_bias: float = 0.3
    checkpoint_every: int = 0  # 0 disables periodic checkpoints


@dataclass
class Stage2Config:
    steps: int = 2000
    tet_resolution: int = 128
    iso: float = -0.03
    sds_resolution: int = 512
    sds_batch: int = 4
    observation_batch: int = 32
    lr: float = 1e-3
    empty_mesh_patience: int = 25


@dataclass
class PipelineConfig:
    profile: str = "simulation"
    seed: int = 0
    prompt: str = ""
    stage1: Stage1Config = dc_field(default_factory=Stage1Config)
    stage2: Stage2Config = dc_field(default_factory=Stage2Config)
    weights1: LossWeights = dc_field(default_factory=LossWeights)
    weights2: LossWeights = dc_field(default_factory=LossWeights)
    view_radius: float = 2.2
    view_fov_deg: float = 45.0
    t_min: int = 20
    t_max: int = 980
    guidance_scale: float = 100.0
    sds_alternate: bool = False  # alternate tactile/guidance steps instead of summing


def default_config(profile: str = "simulation") -> PipelineConfig:
    """Built-in profiles: simulation, real, desk (small fixture-scale runs)."""
    cfg = PipelineConfig(profile=profile)
    if profile == "simulation":
        cfg.weights1 = LossWeights(w_normal_start=0.025, w_normal_end=1.0)
        cfg.weights2 = LossWeights(w_normal_start=0.025, w_normal_end=1.0)
        cfg.stage2.iso = -0.03
    elif profile == "real":
        cfg.weights1 = LossWeights(w_normal_start=0.1, w_normal_end=4.0)
        cfg.weights2 = LossWeights(w_normal_start=0.1, w_normal_end=4.0)
        cfg.stage2.iso = 0.0
    elif profile == "desk":
        cfg.weights1 = LossWeights(w_normal_start=0.025, w_normal_end=1.0)
        cfg.weights2 = LossWeights(w_normal_start=0.025, w_normal_end=1.0)
        cfg.stage1 = Stage1Config(total_steps=1500, ray_batch=2048,
                                  grid_resolutions=(16, 32, 64),
                                  samples_per_ray=384)
        cfg.stage2 = Stage2Config(steps=300, tet_resolution=64, iso=-0.03,
                                  sds_resolution=128)
    else:
        raise ValueError(f"unknown profile {profile!r} (simulation | real | desk)")
    return cfg


_CONFIG_SCALARS = {
    "profile": ("profile", str),
    "seed": ("seed", int),
    "prompt": ("prompt", str),
    "view.radius": ("view_radius", float),
    "view.fov_deg": ("view_fov_deg", float),
    "sds.t_min": ("t_min", int),
    "sds.t_max": ("t_max", int),
    "sds.guidance_scale": ("guidance_scale", float),
    "sds.alternate": ("sds_alternate", lambda s: s.lower() in ("1", "true", "yes")),
}


def load_config(path) -> PipelineConfig:
    """Read the flat key=value config file; unknown keys are an error."""
    text = Path(path).read_text()
    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        pairs[key] = value
    cfg = default_config(pairs.pop("profile", "simulation"))
    stage1_fields = {f.name for f in fields(Stage1Config)}
    stage2_fields = {f.name for f in fields(Stage2Config)}
    weight_fields = {f.name for f in fields(LossWeights)}
    for key, value in pairs.items():
        if key in _CONFIG_SCALARS:
            attr, conv = _CONFIG_SCALARS[key]
            setattr(cfg, attr, conv(value))
            continue
        section, _, name = key.partition(".")
        if section == "stage1" and name in stage1_fields:
            if name == "grid_resolutions":
                setattr(cfg.stage1, name, tuple(int(v) for v in value.split(",")))
            else:
                current = getattr(cfg.stage1, name)
                setattr(cfg.stage1, name, type(current)(value) if not isinstance(current, int)
                        else int(value))
        elif section == "stage2" and name in stage2_fields:
            current = getattr(cfg.stage2, name)
            setattr(cfg.stage2, name, float(value) if isinstance(current, float) else int(value))
        elif section in ("weights1", "weights2") and name in weight_fields:
            target = cfg.weights1 if section == "weights1" else cfg.weights2
            setattr(target, name, int(value) if name == "w_normal_ramp_steps" else float(value))
        else:
            raise KeyError(f"unknown config key {key!r}")
    return cfg


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


class Adam:
    """Adaptive-moment optimizer over a list of parameter arrays."""

    def __init__(self, shapes: list[tuple[int, ...]], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]

    def step(self, params: list[np.ndarray], grads: list[np.ndarray],
             lr_scale: float = 1.0) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        lr = self.lr * lr_scale
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def cosine_lr_scale(step: int, total: int, floor: float = 0.1) -> float:
    """1 -> floor over the run (purely a function of the step: resume-safe)."""
    if total <= 1:
        return 1.0
    c = 0.5 * (1.0 + np.cos(np.pi * min(step, total) / total))
    return floor + (1.0 - floor) * c


# ---------------------------------------------------------------------------
# Train state and checkpointing
# ---------------------------------------------------------------------------


def _rng_state_to_json(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return {"bit_generator": state["bit_generator"],
            "state": {"state": str(state["state"]["state"]),
                      "inc": str(state["state"]["inc"])},
            "has_uint32": state["has_uint32"],
            "uinteger": state["uinteger"]}


def _rng_state_from_json(d: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = {
        "bit_generator": d["bit_generator"],
        "state": {"state": int(d["state"]["state"]), "inc": int(d["state"]["inc"])},
        "has_uint32": d["has_uint32"],
        "uinteger": d["uinteger"],
    }
    return rng


@dataclass
class TrainState:
    step: int
    rng: np.random.Generator
    field_sdf: GridSDF
    optimizer: Adam
    guidance_requests: int = 0
    history: list[dict] = dc_field(default_factory=list)

    def save(self, path) -> None:
        blobs: list[bytes] = [self.field_sdf.dumps()]
        moments = []
        for m in self.optimizer.m:
            moments.append({"shape": list(m.shape)})
            blobs.append(m.astype("<f8").tobytes())
        for v in self.optimizer.v:
            blobs.append(v.astype("<f8").tobytes())
        header = {
            "step": self.step,
            "rng": _rng_state_to_json(self.rng),
            "adam": {"lr": self.optimizer.lr, "beta1": self.optimizer.beta1,
                     "beta2": self.optimizer.beta2, "eps": self.optimizer.eps,
                     "t": self.optimizer.t, "moments": moments},
            "guidance_requests": self.guidance_requests,
            "blob_sizes": [len(b) for b in blobs],
        }
        head = json.dumps(header).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(head)))
            fh.write(head)
            for b in blobs:
                fh.write(b)

    @classmethod
    def load(cls, path) -> "TrainState":
        data = Path(path).read_bytes()
        buf = io.BytesIO(data)
        if buf.read(4) != CHECKPOINT_MAGIC:
            raise ValueError("not a training checkpoint")
        version, head_len = struct.unpack("<IQ", buf.read(12))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"checkpoint version {version} not supported "
                             f"(this build reads {CHECKPOINT_VERSION})")
        header = json.loads(buf.read(head_len).decode("utf-8"))
        blobs = []
        for size in header["blob_sizes"]:
            b = buf.read(size)
            if len(b) != size:
                raise ValueError("truncated checkpoint")
            blobs.append(b)
        field_sdf = GridSDF.loads(blobs[0])
        adam_cfg = header["adam"]
        shapes = [tuple(m["shape"]) for m in adam_cfg["moments"]]
        opt = Adam(shapes, lr=adam_cfg["lr"], beta1=adam_cfg["beta1"],
                   beta2=adam_cfg["beta2"], eps=adam_cfg["eps"])
        opt.t = adam_cfg["t"]
        k = len(shapes)
        for i, s in enumerate(shapes):
            opt.m[i] = np.frombuffer(blobs[1 + i], dtype="<f8").reshape(s).copy()
            opt.v[i] = np.frombuffer(blobs[1 + k + i], dtype="<f8").reshape(s).copy()
        return cls(step=header["step"], rng=_rng_state_from_json(header["rng"]),
                   field_sdf=field_sdf, optimizer=opt,
                   guidance_requests=header["guidance_requests"])


# ---------------------------------------------------------------------------
# Stage 1
# ---------------------------------------------------------------------------


def pool_observation_rays(observations: list[VirtualObservation]) -> RayBatch:
    return RayBatch.concatenate([observation_rays(o) for o in observations])


@dataclass
class StageReport:
    history: list[dict]
    guidance_requests: int
    extra: dict = dc_field(default_factory=dict)

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for row in self.history:
                fh.write(json.dumps(row) + "\n")


def stage1_train(config: PipelineConfig, observations: list[VirtualObservation],
                 backend: GuidanceBackend, out_dir=None,
                 state: TrainState | None = None) -> tuple[GridSDF, StageReport]:
    """Warm-up on tactile losses, then joint tactile + guidance optimization."""
    if not observations:
        raise ValueError("stage 1 requires at least one observation")
    s1 = config.stage1
    rays = pool_observation_rays(observations)
    if state is None:
        field_sdf = GridSDF(resolutions=s1.grid_resolutions,
                            active_levels=s1.init_active_levels)
        field_sdf.init_constant(s1.init_bias)
        field_sdf.mark_unlock_baseline()
        opt = Adam([g.shape for g in field_sdf.levels], lr=s1.lr)
        state = TrainState(step=0, rng=np.random.default_rng(config.seed),
                           field_sdf=field_sdf, optimizer=opt)
    else:
        state.field_sdf._init_active = s1.init_active_levels
    field_sdf = state.field_sdf
    w = config.weights1
    out_dir = Path(out_dir) if out_dir else None

    while state.step < s1.total_steps:
        step = state.step
        field_sdf.unlock_level(step, s1.unlock_start, s1.unlock_every)
        rng = state.rng
        idx = rng.integers(0, len(rays), size=min(s1.ray_batch, max(1, len(rays))))
        batch = rays.subset(idx)
        grads = field_sdf.zero_grads()
        w_normal = w.normal_weight(step)
        dn = depth_normal_loss(field_sdf, batch, grads, w.w_depth, w_normal,
                               w.delta, n_samples=s1.samples_per_ray)
        l_sdf = sdf_loss(field_sdf, batch, w.delta, s1.band_samples, rng, grads, w.w_sdf)
        l_fs = freespace_loss(field_sdf, batch, w.delta, s1.freespace_samples,
                              rng, grads, w.w_fs)
        l_eik = eikonal_loss(field_sdf, max(1, s1.ray_batch // 4), rng, grads, w.w_eik)
        l_smooth = grid_smoothness_loss(field_sdf, grads, w.w_smooth)

        row = {"step": step, "depth": dn["depth"], "normal": dn["normal"],
               "miss": dn["miss"], "sdf": l_sdf, "freespace": l_fs,
               "eikonal": l_eik, "smooth": l_smooth, "w_normal": w_normal,
               "active_levels": field_sdf.active_levels,
               "rays_used": dn["n_used"], "rays_missed": dn["n_missed"]}

        guided = step >= s1.warmup_steps
        if guided:
            cams = sample_view(rng, s1.sds_batch, radius=config.view_radius,
                               fov_deg=config.view_fov_deg,
                               width=s1.sds_resolution, height=s1.sds_resolution)
            seed = int(rng.integers(0, 2 ** 62))
            sds = SdsBatch(cameras=cams, prompt=config.prompt, t_min=config.t_min,
                           t_max=config.t_max, seed=seed,
                           guidance_scale=config.guidance_scale)
            if config.sds_alternate:
                grads_sds = field_sdf.zero_grads()
                outcome = sds_step_field(field_sdf, grads_sds, sds, backend, w.w_sds,
                                         n_samples=s1.samples_per_ray,
                                         request_id_base=state.guidance_requests)
                state.optimizer.step(field_sdf.levels, grads,
                                     lr_scale=cosine_lr_scale(step, s1.total_steps))
                grads = grads_sds
            else:
                outcome = sds_step_field(field_sdf, grads, sds, backend, w.w_sds,
                                         n_samples=s1.samples_per_ray,
                                         request_id_base=state.guidance_requests)
            state.guidance_requests += outcome.requests_sent
            row["sds_grad_norm"] = outcome.grad_norm
            row["sds_requests"] = outcome.requests_sent

        state.optimizer.step(field_sdf.levels, grads,
                             lr_scale=cosine_lr_scale(step, s1.total_steps))
        state.history.append(row)
        state.step += 1
        if out_dir and s1.checkpoint_every and state.step % s1.checkpoint_every == 0:
            state.save(out_dir / f"stage1_step{state.step:06d}.ckpt")
        if step % 100 == 0:
            log.info("stage1 step %d: depth %.4g normal %.4g sdf %.4g fs %.4g eik %.4g",
                     step, dn["depth"], dn["normal"], l_sdf, l_fs, l_eik)

    report = StageReport(history=state.history,
                         guidance_requests=state.guidance_requests,
                         extra={"clamp_warnings": field_sdf.clamp_warnings})
    if out_dir:
        state.save(out_dir / "stage1_final.ckpt")
        report.write_jsonl(out_dir / "stage1_losses.jsonl")
    return field_sdf, report


# ---------------------------------------------------------------------------
# Stage 2
# ---------------------------------------------------------------------------


def _observation_depth_normal(mesh: TriangleMesh, caster: RayCaster,
                              batch: RayBatch, scale_depth: float,
                              scale_normal: float) -> tuple[dict, np.ndarray]:
    """Mesh-render depth/normal losses for one pooled observation batch."""
    res = raycast_mesh(caster, batch.origins, batch.dirs)
    hit = res.hit
    out = {"depth": 0.0, "normal": 0.0, "hit_fraction": float(hit.mean())}
    dV = np.zeros_like(mesh.vertices)
    if not hit.any():
        return out, dV
    derr = batch.d[hit] - res.t[hit]
    nerr = batch.n[hit] - res.normal[hit]
    n_hit = int(hit.sum())
    out["depth"] = float(np.abs(derr).mean())
    out["normal"] = float(np.abs(nerr).sum(axis=1).mean())
    d_depth = np.zeros(len(batch))
    d_normal = np.zeros((len(batch), 3))
    d_depth[hit] = -np.sign(derr) * (scale_depth / n_hit)
    d_normal[hit] = -np.sign(nerr) * (scale_normal / n_hit)
    dV += res.backward_to_vertices(d_normal=d_normal, d_depth=d_depth)
    return out, dV


def stage2_refine(field_sdf: GridSDF, config: PipelineConfig,
                  observations: list[VirtualObservation],
                  backend: GuidanceBackend,
                  out_dir=None) -> tuple[TetGrid, TriangleMesh, StageReport]:
    """Explicit refinement on the tetrahedral grid; returns the final mesh."""
    s2 = config.stage2
    w = config.weights2
    tet = init_tet_from_field(field_sdf, s2.tet_resolution, iso=s2.iso)
    rng = np.random.default_rng(config.seed + 1)
    opt = Adam([tet.s.shape, tet.dv.shape], lr=s2.lr)
    per_obs = [observation_rays(o) for o in observations]
    history: list[dict] = []
    guidance_requests = 0
    empty_streak = 0
    iso_fallback = False
    out_dir = Path(out_dir) if out_dir else None

    for step in range(s2.steps):
        mesh, info = marching_tetrahedra(tet, with_info=True)
        if mesh is None:
            if not iso_fallback and tet.iso != 0.0:
                log.warning("empty mesh at step %d; falling back to iso 0", step)
                tet.iso = 0.0
                iso_fallback = True
                mesh, info = marching_tetrahedra(tet, with_info=True)
            if mesh is None:
                empty_streak += 1
                if empty_streak > s2.empty_mesh_patience:
                    raise RuntimeError(f"mesh stayed empty for {empty_streak} steps")
                continue
        empty_streak = 0
        caster = RayCaster(mesh)

        n_obs = min(len(per_obs), s2.observation_batch)
        chosen = rng.permutation(len(per_obs))[:n_obs]
        batch = RayBatch.concatenate([per_obs[i] for i in sorted(chosen)])
        w_normal = w.normal_weight(step)
        obs_losses, dV = _observation_depth_normal(mesh, caster, batch,
                                                   w.w_depth, w_normal)

        cams = sample_view(rng, s2.sds_batch, radius=config.view_radius,
                           fov_deg=config.view_fov_deg,
                           width=s2.sds_resolution, height=s2.sds_resolution)
        seed = int(rng.integers(0, 2 ** 62))
        sds = SdsBatch(cameras=cams, prompt=config.prompt, t_min=config.t_min,
                       t_max=config.t_max, seed=seed,
                       guidance_scale=config.guidance_scale)
        dV_sds, outcome = sds_step_mesh(mesh, sds, backend, w.w_sds,
                                        request_id_base=guidance_requests)
        guidance_requests += outcome.requests_sent
        if dV_sds is not None:
            dV += dV_sds

        grad_s = np.zeros_like(tet.s)
        grad_dv = np.zeros_like(tet.dv)
        l_nc = normal_consistency_loss(mesh, info, tet, grad_s, grad_dv, w.w_nc)
        info.backprop_vertices(dV, tet, grad_s, grad_dv)

        opt.step([tet.s, tet.dv], [grad_s, grad_dv],
                 lr_scale=cosine_lr_scale(step, s2.steps))
        tet.clamp_offsets()
        history.append({"step": step, "depth": obs_losses["depth"],
                        "normal": obs_losses["normal"], "nc": l_nc,
                        "hit_fraction": obs_losses["hit_fraction"],
                        "sds_grad_norm": outcome.grad_norm,
                        "faces": mesh.n_faces})
        if step % 50 == 0:
            log.info("stage2 step %d: depth %.4g normal %.4g nc %.4g faces %d",
                     step, obs_losses["depth"], obs_losses["normal"], l_nc, mesh.n_faces)

    final_mesh = marching_tetrahedra(tet)
    if final_mesh is None:
        raise RuntimeError("stage 2 produced an empty final mesh")
    report = StageReport(history=history, guidance_requests=guidance_requests,
                         extra={"iso_fallback": iso_fallback})
    if out_dir:
        tet.save(out_dir / "stage2_final.tet")
        report.write_jsonl(out_dir / "stage2_losses.jsonl")
    return tet, final_mesh, report
