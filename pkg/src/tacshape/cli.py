"""Command-line entry points.

Subcommands: simulate | integrate | reconstruct | extract | eval | serve-mock.
Exit codes: 0 success, 1 runtime failure, 2 usage/input error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

log = logging.getLogger("tacshape")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


class UsageError(RuntimeError):
    pass


def _load_mesh_normalized(path):
    from .geometry import load_mesh
    if not Path(path).exists():
        raise UsageError(f"mesh file not found: {path}")
    return load_mesh(path, normalize=True)


def _sensor_spec(args):
    from .touchsim import SensorSpec
    kwargs = {}
    for name in ("width_px", "height_px", "sensing_width", "sensing_height",
                 "press_depth", "max_indentation", "min_contact_fraction"):
        value = getattr(args, name, None)
        if value is not None:
            kwargs[name] = value
    return SensorSpec(**kwargs)


def cmd_simulate(args) -> int:
    from .plots import ensure_dir, plot_contact_sheet
    from .touchsim import PlanningError, simulate_touches, save_observation_set
    if args.touches < 1:
        raise UsageError("--touches must be >= 1")
    mesh, record = _load_mesh_normalized(args.mesh)
    spec = _sensor_spec(args)
    out_dir = ensure_dir(args.out)
    try:
        observations = simulate_touches(mesh, args.touches, spec, args.seed,
                                        gel_sigma_px=args.gel_sigma,
                                        retreat=args.retreat,
                                        poisson_radius=args.poisson_radius)
    except PlanningError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    save_observation_set(observations, out_dir, extra_manifest={
        "mesh": str(args.mesh), "seed": args.seed,
        "normalization": record.to_dict(),
    })
    plot_contact_sheet(observations, out_dir / "contacts.png")
    print(f"wrote {len(observations)} observations to {out_dir}")
    return EXIT_OK


def cmd_integrate(args) -> int:
    from .integration import save_virtual_observation, to_virtual_observation
    from .touchsim import load_observation_set
    obs_dir = Path(args.obs_dir)
    if not (obs_dir / "manifest.json").exists():
        raise UsageError(f"no manifest.json under {obs_dir}")
    observations = load_observation_set(obs_dir)
    count = 0
    for obs in observations:
        vobs = to_virtual_observation(obs, standoff=args.standoff)
        save_virtual_observation(vobs, obs_dir / f"touch_{obs.touch_id:03d}")
        count += 1
    print(f"converted {count} observations (standoff {args.standoff})")
    return EXIT_OK


def _make_backend(args, mesh=None):
    from . import guidance
    endpoint = guidance.resolve_endpoint(getattr(args, "endpoint", None))
    if endpoint:
        return guidance.connect(endpoint)
    mock = getattr(args, "mock", "zero")
    if mock == "zero":
        return guidance.ZeroBackend()
    if mock == "template":
        if mesh is None:
            raise UsageError("--mock template requires --template-mesh")
        return guidance.TemplateMockBackend(mesh)
    raise UsageError(f"unknown mock backend {mock!r}")


def cmd_reconstruct(args) -> int:
    from .geometry import load_mesh, save_mesh
    from .integration import to_virtual_observation
    from .pipeline import default_config, load_config, stage1_train, stage2_refine
    from .plots import ensure_dir, plot_loss_curves, write_history_csv
    from .touchsim import load_observation_set

    obs_dir = Path(args.obs_dir)
    if not (obs_dir / "manifest.json").exists():
        raise UsageError(f"no manifest.json under {obs_dir}")
    config = load_config(args.config) if args.config else default_config(args.profile)
    if args.prompt is not None:
        config.prompt = args.prompt
    if args.seed is not None:
        config.seed = args.seed

    template_mesh = None
    if args.template_mesh:
        template_mesh, _ = load_mesh(args.template_mesh, normalize=True)
    backend = _make_backend(args, template_mesh)

    observations = load_observation_set(obs_dir)
    vobs = [to_virtual_observation(o, standoff=args.standoff) for o in observations]
    out_dir = ensure_dir(args.out)
    manifest = {
        "obs_dir": str(obs_dir), "config": str(args.config or args.profile),
        "seed": config.seed, "prompt": config.prompt,
        "backend": args.endpoint or f"mock:{args.mock}",
        "standoff": args.standoff, "stage1_only": bool(args.stage1_only),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))

    field_sdf, report1 = stage1_train(config, vobs, backend, out_dir=out_dir)
    plot_loss_curves(report1.history, out_dir / "stage1_losses.png", "stage 1 losses")
    write_history_csv(report1.history, out_dir / "stage1_losses.csv")

    from .tetra import init_tet_from_field, marching_tetrahedra
    coarse_tet = init_tet_from_field(field_sdf, config.stage2.tet_resolution,
                                     iso=config.stage2.iso)
    coarse_mesh = marching_tetrahedra(coarse_tet)
    if coarse_mesh is not None:
        save_mesh(coarse_mesh, out_dir / "stage1_mesh.obj")

    if args.stage1_only:
        print(f"stage 1 complete: checkpoint + coarse mesh in {out_dir}")
        return EXIT_OK

    tet, mesh, report2 = stage2_refine(field_sdf, config, vobs, backend,
                                       out_dir=out_dir)
    plot_loss_curves(report2.history, out_dir / "stage2_losses.png", "stage 2 losses")
    write_history_csv(report2.history, out_dir / "stage2_losses.csv")
    save_mesh(mesh, out_dir / "reconstruction.obj")
    print(f"reconstruction written to {out_dir / 'reconstruction.obj'}")
    return EXIT_OK


def cmd_extract(args) -> int:
    from .field import GridSDF
    from .geometry import save_mesh
    from .tetra import TetGrid, init_tet_from_field, marching_tetrahedra
    path = Path(args.checkpoint)
    if not path.exists():
        raise UsageError(f"checkpoint not found: {path}")
    head = path.read_bytes()[:4]
    if head == b"TST1":
        tet = TetGrid.load(path)
        if args.iso is not None:
            tet.iso = args.iso
    elif head == b"TSF1":
        field_sdf = GridSDF.load(path)
        tet = init_tet_from_field(field_sdf, args.resolution,
                                  iso=args.iso if args.iso is not None else 0.0)
    else:
        from .pipeline import TrainState
        try:
            state = TrainState.load(path)
        except ValueError as exc:
            raise UsageError(f"unrecognized checkpoint {path}: {exc}") from exc
        tet = init_tet_from_field(state.field_sdf, args.resolution,
                                  iso=args.iso if args.iso is not None else 0.0)
    mesh = marching_tetrahedra(tet)
    if mesh is None:
        print("error: level set is empty", file=sys.stderr)
        return EXIT_RUNTIME
    save_mesh(mesh, args.out)
    print(f"extracted {mesh.n_faces} faces to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evalmetrics import evaluate
    from .geometry import load_mesh
    from .plots import plot_eval_histogram
    from .sampling import sample_surface_points
    for path in (args.recon, args.gt):
        if not Path(path).exists():
            raise UsageError(f"mesh file not found: {path}")
    recon = load_mesh(args.recon)
    gt = load_mesh(args.gt)
    report = evaluate(recon, gt, n=args.n, seed=args.seed)
    print(report.to_json())
    if args.figure:
        lo, hi = gt.bounds()
        center = 0.5 * (lo + hi)
        scale = 1.0 / float((hi - lo).max())
        pr = (sample_surface_points(recon, args.n, args.seed) - center) * scale
        pg = (sample_surface_points(gt, args.n, args.seed + 1) - center) * scale
        plot_eval_histogram(pr, pg, args.figure)
    return EXIT_OK


def cmd_serve_mock(args) -> int:
    from . import guidance
    from .geometry import load_mesh
    mesh = None
    if args.backend == "template":
        if not args.template_mesh:
            raise UsageError("--backend template requires --template-mesh")
        mesh, _ = load_mesh(args.template_mesh, normalize=True)
        backend = guidance.TemplateMockBackend(mesh)
    else:
        backend = guidance.ZeroBackend()
    if args.stdio:
        guidance.serve_stdio(backend)
        return EXIT_OK
    server = guidance.MockServer(backend, host=args.host, port=args.port).start()
    print(f"serving {args.backend} mock on {server.host}:{server.port}", flush=True)
    try:
        import time
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        server.stop()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tacshape",
                                description="tactile-contact mesh reconstruction toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="plan touches and render contact depth maps")
    sim.add_argument("--mesh", required=True)
    sim.add_argument("--touches", "-k", type=int, default=20)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--out", required=True)
    sim.add_argument("--gel-sigma", type=float, default=0.0, dest="gel_sigma")
    sim.add_argument("--retreat", type=float, default=None)
    sim.add_argument("--poisson-radius", type=float, default=None, dest="poisson_radius")
    for name, typ, default in (
            ("--width-px", int, None), ("--height-px", int, None),
            ("--sensing-width", float, None), ("--sensing-height", float, None),
            ("--press-depth", float, None), ("--max-indentation", float, None),
            ("--min-contact-fraction", float, None)):
        sim.add_argument(name, type=typ, default=default,
                         dest=name[2:].replace("-", "_"))
    sim.set_defaults(func=cmd_simulate)

    integ = sub.add_parser("integrate", help="convert observations to virtual-camera form")
    integ.add_argument("--obs-dir", required=True, dest="obs_dir")
    integ.add_argument("--standoff", type=float, default=0.020)
    integ.set_defaults(func=cmd_integrate)

    rec = sub.add_parser("reconstruct", help="run the two-stage optimization")
    rec.add_argument("--obs-dir", required=True, dest="obs_dir")
    rec.add_argument("--config", default=None)
    rec.add_argument("--profile", default="simulation",
                     choices=("simulation", "real", "desk"))
    rec.add_argument("--prompt", default=None)
    rec.add_argument("--seed", type=int, default=None)
    rec.add_argument("--out", required=True)
    rec.add_argument("--standoff", type=float, default=0.020)
    rec.add_argument("--endpoint", default=None,
                     help="guidance backend host:port or stdio:<cmd>")
    rec.add_argument("--mock", default="zero", choices=("zero", "template"))
    rec.add_argument("--template-mesh", default=None, dest="template_mesh")
    rec.add_argument("--stage1-only", action="store_true", dest="stage1_only")
    rec.set_defaults(func=cmd_reconstruct)

    ext = sub.add_parser("extract", help="extract a mesh from a checkpoint")
    ext.add_argument("--checkpoint", required=True)
    ext.add_argument("--iso", type=float, default=None)
    ext.add_argument("--resolution", type=int, default=128)
    ext.add_argument("--out", required=True)
    ext.set_defaults(func=cmd_extract)

    ev = sub.add_parser("eval", help="EMD + Chamfer between two meshes")
    ev.add_argument("--recon", required=True)
    ev.add_argument("--gt", required=True)
    ev.add_argument("--n", type=int, default=2048)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--figure", default=None)
    ev.set_defaults(func=cmd_eval)

    srv = sub.add_parser("serve-mock", help="serve a mock guidance backend")
    srv.add_argument("--backend", default="zero", choices=("zero", "template"))
    srv.add_argument("--template-mesh", default=None, dest="template_mesh")
    srv.add_argument("--host", default="127.0.0.1")
    srv.add_argument("--port", type=int, default=0)
    srv.add_argument("--stdio", action="store_true")
    srv.set_defaults(func=cmd_serve_mock)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # runtime failures
        log.exception("command failed")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
