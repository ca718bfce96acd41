"""Command-line driver for every pipeline stage.

Exit codes: 0 success, 2 input error, 3 numeric failure (non-finite output).
Every command records its resolved manifest next to its outputs.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import kernels
from .assets import RunManifest, build_session, default_camera_for, load_mesh, load_scene
from .camera import Camera
from .envlight import (
    EnvBudget,
    init_env_mixture,
    optimize_env,
    per_record_residuals,
    render_equirect,
    sample_surface_pixels,
    sample_views,
    trace_hemisphere,
    AlbedoModel,
)
from .fh import build_fh
from .field import gen_procedural, save_field, SCENE_IDS
from .images import mae, psnr, read_pfm, tonemap, to_uint8, write_pfm, write_png
from .insert import render_background
from .oracle import OracleConfig, mc_render
from .sg import SGMixture
from .shadowfield import precompute_ssdf_field


class NumericFailure(RuntimeError):
    pass


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NumericFailure(f"non-finite values in {what}")


def _manifest_from_args(args):
    m = RunManifest()
    if getattr(args, "manifest", None):
        m = RunManifest.load(args.manifest)
    for key in ("scene", "object", "env", "ssdf", "fh", "seed", "spp", "frames"):
        v = getattr(args, key, None)
        if v is not None:
            setattr(m, key, v)
    if getattr(args, "res", None):
        w, h = args.res.lower().split("x")
        m.res = (int(w), int(h))
    if getattr(args, "position", None):
        m.transform["position"] = [float(x) for x in args.position.split(",")]
    if getattr(args, "obj_scale", None):
        m.transform["scale"] = float(args.obj_scale)
    if getattr(args, "roughness", None) is not None:
        m.material["roughness"] = float(args.roughness)
    if getattr(args, "metallic", None) is not None:
        m.material["metallic"] = float(args.metallic)
    if getattr(args, "albedo", None):
        m.material["albedo"] = [float(x) for x in args.albedo.split(",")]
    return m


def _record_manifest(m, out_path):
    m.save(Path(out_path).with_suffix(".manifest.json"))


def _record_args(args, out_path, keys):
    doc = {k: getattr(args, k) for k in keys}
    with open(Path(out_path).with_suffix(".manifest.json"), "w") as f:
        json.dump({"command": args.command, **doc}, f, indent=2, sort_keys=True)
        f.write("\n")


def cmd_gen_scene(args):
    field = gen_procedural(args.scene_id, args.resolution)
    save_field(field, args.out)
    _record_args(args, args.out, ("scene_id", "resolution"))
    print(f"wrote {args.out} ({args.scene_id}@{args.resolution})")
    return 0


def cmd_precompute_ssdf(args):
    mesh = load_mesh(args.mesh)
    t0 = time.perf_counter()
    ssdf = precompute_ssdf_field(mesh, direction_res=args.dir_res,
                                 extent_scale=args.extent_scale)
    ssdf.save(args.out)
    _record_args(args, args.out, ("mesh", "dir_res", "extent_scale"))
    print(
        f"wrote {args.out}: grid 16x16x16, R={ssdf.direction_res}, rank {ssdf.rank}, "
        f"size ratio {ssdf.size_ratio():.4%}, {time.perf_counter() - t0:.1f}s"
    )
    return 0


def cmd_build_fh(args):
    table = build_fh(args.theta_res, args.lambda_res)
    table.save(args.out)
    _record_args(args, args.out, ("theta_res", "lambda_res"))
    print(f"wrote {args.out}: {args.theta_res} thetas x {args.lambda_res} lambdas")
    return 0


def cmd_estimate_env(args):
    field = load_scene(args.scene)
    rng_seed = args.seed or 0
    views = sample_views(field, count=args.views, seed=rng_seed)
    records = []
    for i, cam in enumerate(views):
        recs, _ = sample_surface_pixels(field, cam, count=args.pixels, seed=rng_seed * 7919 + i)
        records.extend(recs)
    for i, rec in enumerate(records):
        trace_hemisphere(field, rec, ray_count=args.rays, seed=rng_seed * 104729 + i)
    scale = float(np.mean([r.e_nerf.mean() for r in records])) or 1.0
    init = init_env_mixture(32, scale, seed=rng_seed)
    albedo = AlbedoModel(field.bbox_min, field.bbox_max, seed=rng_seed)
    budget = EnvBudget(iterations=args.iters, seed=rng_seed)
    est, albedo = optimize_env(records, init, albedo, budget)
    est.mixture.save(args.out)
    equi = render_equirect(est.mixture)
    write_pfm(str(Path(args.out).with_suffix(".envmap.pfm")), equi)
    resid = per_record_residuals(records, est.mixture, albedo, seed=rng_seed)
    with open(Path(args.out).with_suffix(".residuals.csv"), "w") as f:
        f.write("index,x,y,z,lo_r,lo_g,lo_b,enerf_r,enerf_g,enerf_b,resid_r,resid_g,resid_b\n")
        for i, r in enumerate(records):
            f.write(
                f"{i},{r.position[0]:.6g},{r.position[1]:.6g},{r.position[2]:.6g},"
                f"{r.radiance[0]:.6g},{r.radiance[1]:.6g},{r.radiance[2]:.6g},"
                f"{r.e_nerf[0]:.6g},{r.e_nerf[1]:.6g},{r.e_nerf[2]:.6g},"
                f"{resid[i][0]:.6g},{resid[i][1]:.6g},{resid[i][2]:.6g}\n"
            )
    _record_args(args, args.out, ("scene", "views", "pixels", "rays", "iters", "seed"))
    print(f"wrote {args.out}: final loss {est.final_loss:.6g}, "
          f"{len(est.loss_trace) - 1} iterations, {len(records)} records")
    return 0


def _orbit_camera(base, field, frame, total):
    ang = 2.0 * np.pi * frame / max(total, 1)
    ext = float(np.max(field.extent))
    rel = base.position - field.center
    rot = np.array(
        [[np.cos(ang), -np.sin(ang), 0.0], [np.sin(ang), np.cos(ang), 0.0], [0.0, 0.0, 1.0]]
    )
    return Camera(field.center + rot @ rel, base.look_at, base.up, base.fov_y_deg,
                  base.width, base.height)


def cmd_render(args):
    m = _manifest_from_args(args)
    session = build_session(m)
    base_cam = session.camera
    out = Path(args.out)
    buffers = tuple(args.dump_aux.split(",")) if args.dump_aux else ()
    for f in range(m.frames):
        if m.frames > 1:
            session.camera = _orbit_camera(base_cam, session.field, f, m.frames)
        packet = session.render_frame(buffers=buffers)
        _check_finite(packet.image, "rendered frame")
        stem = out if m.frames == 1 else out.with_name(f"{out.stem}_{f:04d}{out.suffix}")
        if stem.suffix == ".png":
            write_png(stem, to_uint8(tonemap(packet.image)))
        else:
            write_pfm(stem, packet.image)
        for name, buf in packet.aux.items():
            write_pfm(stem.with_name(f"{stem.stem}.{name}.pfm"), buf)
        if args.packet:
            with open(args.packet, "wb") as fh:
                fh.write(packet.to_bytes(buffers))
        print(f"frame {packet.frame_id}: " +
              ", ".join(f"{k}={v:.1f}" for k, v in packet.timings.items()))
    _record_manifest(m, out)
    return 0


def write_kappa_csv(path, session, cfg):
    """Per-pixel MC shadow ratio with batch-means standard errors (surface
    pixels only; others write kappa=1 with zero error)."""
    from .field import _gradient_batch, intersect_bounds_batch, march_batch
    from .oracle import mc_kappa

    cam = session.camera
    o, d = cam.rays()
    t0, t1, ok = intersect_bounds_batch(session.field, o, d)
    _, opac, _, depth, _ = march_batch(session.field, o, d,
                                       np.where(ok, t0, 0), np.where(ok, t1, 0))
    mesh = session.object.world_mesh if session.object else None
    with open(path, "w") as f:
        f.write("x,y,kr,kg,kb,se_r,se_g,se_b\n")
        for i in range(len(o)):
            px, py = i % cam.width, i // cam.width
            if opac[i] < cfg.opacity_threshold or mesh is None:
                f.write(f"{px},{py},1,1,1,0,0,0\n")
                continue
            x = np.clip(o[i] + d[i] * depth[i], session.field.bbox_min + 1e-9,
                        session.field.bbox_max - 1e-9)
            g = _gradient_batch(session.field, x[None, :])[0]
            gn = np.linalg.norm(g)
            n = -g / gn if gn > 1e-12 else -d[i]
            kap, se = mc_kappa(session.env, mesh, x, n, cfg)
            f.write(f"{px},{py},{kap[0]:.6g},{kap[1]:.6g},{kap[2]:.6g},"
                    f"{se[0]:.3g},{se[1]:.3g},{se[2]:.3g}\n")


def cmd_oracle_render(args):
    m = _manifest_from_args(args)
    session = build_session(m)
    cfg = OracleConfig(spp=m.spp, seed=m.seed)
    img = mc_render(session.field, session.object, session.env, session.camera, cfg)
    _check_finite(img, "oracle render")
    write_pfm(args.out, img)
    if args.kappa_csv:
        write_kappa_csv(args.kappa_csv, session, cfg)
    _record_manifest(m, args.out)
    print(f"wrote {args.out} at {m.spp} spp")
    return 0


def cmd_diff(args):
    a = read_pfm(args.image)
    b = read_pfm(args.reference)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    _check_finite(a, args.image)
    _check_finite(b, args.reference)
    p = psnr(a, b)
    report = {"psnr_db": "inf" if np.isinf(p) else round(p, 4), "mae": mae(a, b)}
    print(json.dumps(report))
    if args.min_psnr is not None and p < args.min_psnr:
        print(f"FAIL: PSNR {p:.2f} dB below required {args.min_psnr}", file=sys.stderr)
        return 3
    return 0


def cmd_bench(args):
    if args.compare_kernels:
        _bench_kernels()
        return 0
    m = _manifest_from_args(args)
    session = build_session(m)
    session.render_frame()  # warm start + caches
    rows = []
    for _ in range(args.reps):
        packet = session.render_frame()
        rows.append(packet.timings)
    keys = ("incident_ms", "sg_ms", "object_ms", "composite_ms", "shadow_ms")
    labels = {"incident_ms": "incident", "sg_ms": "sg-update", "object_ms": "object",
              "composite_ms": "composite+shadow"}
    print(f"{'stage':<18}{'mean ms':>10}{'min ms':>10}")
    for k in keys:
        vals = [r[k] for r in rows]
        label = labels.get(k, k)
        if k == "composite_ms":
            vals = [r["composite_ms"] + r["shadow_ms"] for r in rows]
        elif k == "shadow_ms":
            continue
        print(f"{label:<18}{np.mean(vals):>10.2f}{np.min(vals):>10.2f}")
    total = [sum(r[k] for k in keys) for r in rows]
    print(f"{'total':<18}{np.mean(total):>10.2f}{np.min(total):>10.2f}")
    return 0


def _bench_kernels():
    """Compare the compiled and pure-Python kernel backends."""
    from .field import gen_procedural
    from .kernels import get_backend
    from .mesh import icosphere

    field = gen_procedural("box_room", 64)
    rng = np.random.default_rng(0)
    n = 20000
    o = rng.uniform(-0.8, 0.8, (n, 3))
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    t0 = np.zeros(n)
    t1 = np.full(n, 3.0)
    mesh = icosphere(4)
    nodes, soup, _ = mesh.accel
    mo = rng.uniform(-3, 3, (n, 3))
    backends = ["python"]
    try:
        get_backend("compiled")
        backends.append("compiled")
    except ImportError:
        pass
    print(f"active backend: {kernels.backend_name()}")
    print(f"{'kernel':<12}{'backend':<10}{'rays/s':>14}")
    results = {}
    for name in backends:
        impl = get_backend(name)
        t = time.perf_counter()
        kernels.march_rays(field.density, field.emission, field.bbox_min, field.cell,
                           o, d, t0, t1, 0.02, impl=impl)
        dt = time.perf_counter() - t
        results[("march", name)] = n / dt
        print(f"{'march':<12}{name:<10}{n / dt:>14.0f}")
        t = time.perf_counter()
        kernels.mesh_hit(nodes, soup, mo, d, impl=impl)
        dt = time.perf_counter() - t
        results[("mesh_hit", name)] = n / dt
        print(f"{'mesh_hit':<12}{name:<10}{n / dt:>14.0f}")
    if len(backends) == 2:
        for k in ("march", "mesh_hit"):
            ratio = results[(k, "compiled")] / results[(k, "python")]
            print(f"{k}: compiled is {ratio:.1f}x the python fallback")


def cmd_serve(args):
    from .server import serve

    m = _manifest_from_args(args)
    serve(m, host=args.host, port=args.port, static_dir=args.static)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="sginsert",
                                description="virtual object insertion into voxel radiance fields")
    sub = p.add_subparsers(dest="command", required=True)

    def common_run(sp):
        sp.add_argument("--manifest", help="JSON run manifest; flags override")
        sp.add_argument("--scene", help="VRF path or procedural id@res")
        sp.add_argument("--object", help="OBJ path or sphere@N / blob@N")
        sp.add_argument("--env", help="SGMIX environment file")
        sp.add_argument("--ssdf", help="SSDF shadow field file")
        sp.add_argument("--fh", help="FHT1 table file (built on demand if omitted)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--spp", type=int)
        sp.add_argument("--res", help="WxH (default 640x360)")
        sp.add_argument("--frames", type=int)
        sp.add_argument("--position", help="object position x,y,z")
        sp.add_argument("--obj-scale", dest="obj_scale", help="object uniform scale")
        sp.add_argument("--roughness", type=float)
        sp.add_argument("--metallic", type=float)
        sp.add_argument("--albedo", help="r,g,b in [0,1]")

    sp = sub.add_parser("gen-scene", help="write a procedural VRF field")
    sp.add_argument("scene_id", choices=SCENE_IDS)
    sp.add_argument("--resolution", type=int, default=64)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_scene)

    sp = sub.add_parser("precompute-ssdf", help="bake an object's SSDF shadow field")
    sp.add_argument("mesh", help="OBJ path or sphere@N / blob@N")
    sp.add_argument("--dir-res", type=int, default=64)
    sp.add_argument("--extent-scale", type=float, default=3.0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_precompute_ssdf)

    sp = sub.add_parser("build-fh", help="build the half-space SG mass table")
    sp.add_argument("--theta-res", type=int, default=512)
    sp.add_argument("--lambda-res", type=int, default=64)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_build_fh)

    sp = sub.add_parser("estimate-env", help="inverse-render the environment lighting")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--views", type=int, default=100)
    sp.add_argument("--pixels", type=int, default=64)
    sp.add_argument("--rays", type=int, default=32768)
    sp.add_argument("--iters", type=int, default=120)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_estimate_env)

    sp = sub.add_parser("render", help="render frame(s) through the insertion pipeline")
    common_run(sp)
    sp.add_argument("--out", required=True, help=".pfm (linear) or .png (preview)")
    sp.add_argument("--dump-aux", help="comma list: kappa,i_alpha,depth,mask,object,incident")
    sp.add_argument("--packet", help="also write the binary FramePacket here")
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("oracle-render", help="Monte-Carlo reference render")
    common_run(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--kappa-csv", dest="kappa_csv",
                    help="also write per-pixel MC kappa + standard errors")
    sp.set_defaults(func=cmd_oracle_render)

    sp = sub.add_parser("diff", help="PSNR/MAE between two PFM images")
    sp.add_argument("image")
    sp.add_argument("reference")
    sp.add_argument("--min-psnr", type=float)
    sp.set_defaults(func=cmd_diff)

    sp = sub.add_parser("bench", help="per-stage timings / kernel backend comparison")
    common_run(sp)
    sp.add_argument("--reps", type=int, default=3)
    sp.add_argument("--compare-kernels", action="store_true")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("serve", help="run the interactive session server")
    common_run(sp)
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, default=7878)
    sp.add_argument("--static", help="directory of viewer static files")
    sp.set_defaults(func=cmd_serve)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0
    try:
        return args.func(args)
    except NumericFailure as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
