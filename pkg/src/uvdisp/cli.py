"""Command-line driver.

Exit codes: 0 success, 1 computation error, 2 usage or IO error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import animate as anim
from . import config as cfgmod
from . import fixtures as fx
from . import metrics as mt
from . import registration as reg
from . import shape_model as sm
from . import uv
from .mesh import MeshError, ScanCloud, TemplateMesh, build_subdivision_map, load_mesh, save_template, write_ply
from .optim import LossWeights, MeshLoss, central_differences, relative_error

log = logging.getLogger("uvdisp.cli")

SEED_ENV = "HEADCRAFT_SEED"
EXIT_OK, EXIT_COMPUTE, EXIT_USAGE = 0, 1, 2


class InputError(Exception):
    """Bad paths, unreadable files or invalid manifests (exit code 2)."""


def default_seed():
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise InputError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def setup_logging(level="INFO"):
    root = logging.getLogger("uvdisp")
    for h in list(root.handlers):
        root.removeHandler(h)
    h = logging.StreamHandler(sys.stderr)
    h.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s %(message)s"))
    root.addHandler(h)
    root.setLevel(level)


def _need(path):
    if not os.path.exists(path):
        raise InputError(f"no such file: {path}")
    return path


def _load(path, kind="template"):
    try:
        return load_mesh(_need(path), kind)
    except (MeshError, ValueError, UnicodeDecodeError) as exc:
        raise InputError(f"{path}: {exc}") from None


def _load_map(path):
    try:
        return uv.load_map(_need(path))
    except (OSError, ValueError) as exc:
        raise InputError(f"{path}: {exc}") from None


def _load_model(path):
    try:
        return sm.load_model(_need(path))
    except (OSError, ValueError) as exc:
        raise InputError(f"{path}: {exc}") from None


def _ensure_parent(path):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)


def _write_json(path, obj):
    _ensure_parent(path)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(path):
    """JSON manifest: ``{"template": str, "scans": [{"path", "subject"?}], "output"?}``.

    Relative paths are resolved against the manifest's directory.
    """
    try:
        with open(_need(path)) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from None
    root = os.path.dirname(os.path.abspath(path))

    def res(p):
        return p if os.path.isabs(p) else os.path.join(root, p)

    if "scans" not in data or not isinstance(data["scans"], list):
        raise InputError(f"{path}: manifest needs a 'scans' list")
    scans, seen = [], set()
    for i, item in enumerate(data["scans"]):
        item = {"path": item} if isinstance(item, str) else dict(item)
        if "path" not in item:
            raise InputError(f"{path}: scan entry {i} has no 'path'")
        item["path"] = res(item["path"])
        item["name"] = os.path.splitext(os.path.basename(item["path"]))[0]
        item.setdefault("subject", item["name"])
        item["template"] = res(item.get("template", data.get("template", "")))
        if item["name"] in seen:
            raise InputError(f"{path}: duplicate scan name {item['name']!r}")
        seen.add(item["name"])
        scans.append(item)
    out = res(data["output"]) if data.get("output") else None
    return {"scans": scans, "output": out}


# ---------------------------------------------------------------------------
# commands


def _register_job(job):
    name, tpl_path, scan_path, prefix, cfg_text, partial, sparse, similarity = job
    cfg = cfgmod.parse_config(cfg_text)
    mesh = load_mesh(tpl_path, "template")
    scan = load_mesh(scan_path, "scan")
    if similarity is not None:
        s, t = similarity[0], np.asarray(similarity[1:], dtype=np.float64)
        scan = ScanCloud(s * scan.points + t, scan.faces)
    if partial:
        p = cfg.partial
        res = reg.register_partial(mesh, scan, p.stage1.to_stage_config("vector"),
                                   p.stage2.to_stage_config("normal"),
                                   proximity=p.proximity_sparse if sparse else p.proximity,
                                   expansion=p.expansion, floor_quantile=p.floor_quantile,
                                   vertical_axis=p.vertical_axis)
    else:
        r = cfg.register
        res = reg.register_full(mesh, scan, r.stage1.to_stage_config("vector"), r.stage2.to_stage_config("normal"))
    reg.save_result(prefix, mesh, res)
    return {"name": name, "final_loss": res.trace[-1][2], "chamfer_stage1": res.stage_chamfer["stage1"],
            "chamfer_stage2": res.stage_chamfer["stage2"], "masked": int(res.mask.sum())}


def _run_register_jobs(jobs, workers):
    results = {}

    def record(job, fut_or_val):
        results[job[0]] = fut_or_val

    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            futs = [(job, ex.submit(_register_job, job)) for job in jobs]
            for job, fut in futs:
                try:
                    record(job, fut.result())
                except Exception as exc:  # reported per scan
                    record(job, exc)
    else:
        for job in jobs:
            try:
                record(job, _register_job(job))
            except Exception as exc:
                record(job, exc)
    return results


def _write_summary(path, jobs, results):
    failed = []
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "status", "final_loss", "chamfer_stage1", "chamfer_stage2", "masked", "error"])
        for job in jobs:
            r = results[job[0]]
            if isinstance(r, Exception):
                failed.append((job[0], f"{type(r).__name__}: {r}"))
                w.writerow([job[0], "error", "", "", "", "", f"{type(r).__name__}: {r}"])
            else:
                w.writerow([r["name"], "ok", repr(r["final_loss"]), repr(r["chamfer_stage1"]),
                            repr(r["chamfer_stage2"]), r["masked"], ""])
    return failed


def _report_failures(failed):
    if failed:
        width = max(len(n) for n, _ in failed)
        print("failed scans:", file=sys.stderr)
        for n, msg in failed:
            print(f"  {n:<{width}}  {msg}", file=sys.stderr)
        return EXIT_COMPUTE
    return EXIT_OK


def cmd_register(args, cfg):
    man = read_manifest(args.manifest)
    out = args.out or man["output"]
    if not out:
        raise InputError("no output directory (use --out or the manifest's 'output')")
    for s in man["scans"]:
        _need(s["template"])
        _need(s["path"])
    os.makedirs(out, exist_ok=True)
    text = cfgmod.dump_config(cfg)
    jobs = [(s["name"], s["template"], s["path"], os.path.join(out, s["name"]), text, False, False,
             args.similarity)
            for s in man["scans"]]
    t0 = time.time()
    results = _run_register_jobs(jobs, cfg.workers)
    failed = _write_summary(os.path.join(out, "summary.csv"), jobs, results)
    log.info("registered %d scans (%d failed) in %.1fs", len(jobs), len(failed), time.time() - t0)
    return _report_failures(failed)


def cmd_register_partial(args, cfg):
    _need(args.template)
    _need(args.cloud)
    _ensure_parent(args.out + ".obj")
    job = (os.path.basename(args.out), args.template, args.cloud, args.out, cfgmod.dump_config(cfg), True, args.sparse,
           args.similarity)
    results = _run_register_jobs([job], 1)
    failed = _write_summary(args.out + ".summary.csv", [job], results)
    return _report_failures(failed)


def _baked_template(args, cfg):
    tpl = _load(args.template)
    if tpl.corner_uvs is None:
        raise InputError(f"{args.template}: template has no texture coordinates")
    return tpl


def cmd_bake(args, cfg):
    tpl = _baked_template(args, cfg)
    if args.disp:
        try:
            disp = reg.read_displacements(_need(args.disp))
        except ValueError as exc:
            raise InputError(str(exc)) from None
    else:
        registered = _load(args.mesh, "scan")
        if len(registered.points) != tpl.n_vertices:
            raise InputError(f"{args.mesh}: vertex count does not match the template")
        disp = registered.points - tpl.vertices
    if disp.shape != (tpl.n_vertices, 3):
        raise InputError("displacement table does not match the template")
    res = cfg.uv.resolution
    m, overlaps = uv.bake(tpl, disp, res)
    if args.postprocess:
        m = uv.postprocess(m, uv.build_seam_table(tpl, res), cfg.uv.blend_radius)
    _ensure_parent(args.out)
    uv.save_map(args.out, m)
    if args.mask:
        try:
            vmask = reg.read_mask(_need(args.mask)).astype(np.float64)
        except ValueError as exc:
            raise InputError(str(exc)) from None
        if len(vmask) != tpl.n_vertices:
            raise InputError(f"{args.mask}: mask length does not match the template")
        mm, _ = uv.bake(tpl, vmask, res)
        uv.write_mask_image(args.mask_out or os.path.splitext(args.out)[0] + ".mask.png",
                            (mm.values[..., 0] >= 0.5) & mm.valid)
    log.info("baked %dx%d map (%d valid texels, %d overlaps)", res, res, int(m.valid.sum()), overlaps)
    return EXIT_OK


def cmd_postprocess(args, cfg):
    tpl = _baked_template(args, cfg)
    m = _load_map(args.map)
    seam = uv.build_seam_table(tpl, m.height, m.width)
    out = uv.postprocess(m, seam, cfg.uv.blend_radius)
    _ensure_parent(args.out)
    uv.save_map(args.out, out)
    return EXIT_OK


def _map_list(args):
    paths = list(args.maps or [])
    if args.list:
        with open(_need(args.list)) as fh:
            root = os.path.dirname(os.path.abspath(args.list))
            paths += [p if os.path.isabs(p) else os.path.join(root, p)
                      for p in (ln.strip() for ln in fh) if p]
    if not paths:
        raise InputError("no input maps given")
    return paths


def cmd_fit_pca(args, cfg):
    maps = [_load_map(p) for p in _map_list(args)]
    k = args.components if args.components is not None else min(cfg.model.components, len(maps) - 1)
    model = sm.fit_pca(maps, k)
    _ensure_parent(args.out)
    sm.save_model(args.out, model)
    log.info("fitted %d components from %d maps", model.n_components, len(maps))
    return EXIT_OK


def cmd_sample(args, cfg):
    model = _load_model(args.model)
    psi = cfg.model.psi if args.psi is None else args.psi
    codes = sm.sample_codes(model, args.count, args.seed)
    os.makedirs(args.out, exist_ok=True)
    ext = ".png" if args.format == "png" else ".raw"
    for i, z in enumerate(codes):
        uv.save_map(os.path.join(args.out, f"sample_{i:05d}{ext}"), sm.sample(model, z, psi))
    np.savetxt(os.path.join(args.out, "codes.txt"), codes, fmt="%.17g")
    return EXIT_OK


def cmd_fit_latent(args, cfg):
    model = _load_model(args.model)
    target = _load_map(args.map)
    if args.mask:
        try:
            mask = uv.read_mask_image(_need(args.mask), model.shape)
        except ValueError as exc:
            raise InputError(str(exc)) from None
    else:
        mask = np.ones(model.shape, dtype=bool)
    mc = cfg.model
    code = sm.fit_latent_masked(model, target, mask, mc.reg, mc.face_weight, args.iterative or mc.iterative,
                                mc.steps, mc.lr, mc.l1_weight)
    _ensure_parent(args.out)
    np.savetxt(args.out, code[None], fmt="%.17g")
    if args.map_out:
        uv.save_map(args.map_out, model.to_map(sm.reconstruct(model, code)))
    return EXIT_OK


def cmd_apply(args, cfg):
    tpl = _baked_template(args, cfg)
    m = _load_map(args.map)
    m = uv.fill_empty(m, uv.build_seam_table(tpl, m.height, m.width))
    disp = uv.sample_vertices(m, tpl)[:, :3]
    _ensure_parent(args.out)
    save_template(args.out, tpl, tpl.vertices + disp)
    return EXIT_OK


def cmd_animate(args, cfg):
    neutral = _load(args.neutral)
    m = _load_map(args.map)
    loaded = [_load(p, "scan") for p in args.frames]
    for p, f in zip(args.frames, loaded):
        if f.faces is None or not np.array_equal(f.faces, neutral.faces):
            raise MeshError(f"{p}: frame does not share the neutral topology")
    frames = [TemplateMesh(f.points, f.faces, neutral.corner_uvs, neutral.regions) for f in loaded]
    iters = cfg.animate.subdivision if args.iterations is None else args.iterations
    smap = build_subdivision_map(neutral, iters)
    m = uv.fill_empty(m, uv.build_seam_table(anim.prepare_frame(neutral, smap, {}), m.height, m.width))
    outs = anim.animate_sequence(neutral, frames, m, smap, cfg.animate.smoothing.as_dict(), cfg.workers)
    anim.write_sequence(args.out, outs)
    return EXIT_OK


def _read_subjects(path):
    with open(_need(path)) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}: invalid JSON ({exc})") from None
    return data


def _clouds(paths, n, seed):
    out = []
    for i, p in enumerate(paths):
        obj = _load(p, "scan")
        if obj.faces is not None and len(obj.faces):
            out.append(mt.sample_surface((obj.points, obj.faces), n, seed + i))
        else:
            pts = obj.points
            if len(pts) > n:
                pts = pts[np.sort(np.random.default_rng(seed + i).choice(len(pts), n, replace=False))]
            out.append(pts)
    return out


def cmd_metrics(args, cfg):
    ref_paths = list(args.ref)
    if args.subjects:
        subj = _read_subjects(args.subjects)
        kept, seen = [], set()
        for p in ref_paths:
            s = subj.get(os.path.basename(p), subj.get(p, p))
            if s not in seen:
                seen.add(s)
                kept.append(p)
        ref_paths = kept
    n = cfg.metrics.points if args.points is None else args.points
    grid = cfg.metrics.grid if args.grid is None else args.grid
    gen = _clouds(args.gen, n, args.seed)
    ref = _clouds(ref_paths, n, args.seed + 100003)
    report = mt.evaluate(gen, ref, grid, cfg.workers, {"points": n, "seed": args.seed})
    _ensure_parent(args.out)
    with open(args.out, "w") as fh:
        fh.write(report.to_json() + "\n")
    print(report.to_table())
    return EXIT_OK


def gradcheck(n_meshes=5, seed=0, h=1e-6):
    """Finite-difference check of every loss term on random small meshes.

    The targets include far outliers so the pruned cases actually drop
    correspondences. Returns a list of ``(case, max relative error)``.
    """
    rng = np.random.default_rng(seed)
    cases = [
        ("chamfer pruned squared", LossWeights(1.0, 0.0, 0.0, 0.25, True)),
        ("chamfer unpruned squared", LossWeights(1.0, 0.0, 0.0, np.inf, True)),
        ("chamfer pruned unsquared", LossWeights(1.0, 0.0, 0.0, 0.25, False)),
        ("chamfer unpruned unsquared", LossWeights(1.0, 0.0, 0.0, np.inf, False)),
        ("edge", LossWeights(0.0, 1.0, 0.0)),
        ("laplacian", LossWeights(0.0, 0.0, 1.0)),
        ("total", LossWeights(2.0, 3.0, 0.5, 0.25, True)),
    ]
    out = []
    for k in range(n_meshes):
        mesh = fx.random_mesh(6 + k % 3, seed=seed + k)
        n = mesh.n_vertices
        near = mesh.vertices[rng.integers(0, n, 40)] + rng.normal(0, 0.05, (40, 3))
        far = mesh.vertices[rng.integers(0, n, 6)] + np.array([0.0, 0.0, 0.8])
        target = np.concatenate([near, far])
        x0 = mesh.vertices + rng.normal(0, 0.02, mesh.vertices.shape)
        for name, w in cases:
            fn = MeshLoss(mesh.faces, n, target, w)
            _, _, g = fn(x0)
            num = central_differences(lambda x: fn(x, need_grad=False)[0], x0, h)
            out.append((f"mesh{k} ({n} v) {name}", relative_error(g, num)))
    return out


def cmd_gradcheck(args, cfg):
    rows = gradcheck(args.meshes, args.seed)
    worst = max(e for _, e in rows)
    for name, e in rows:
        print(f"{name:<36} {e:.3e}")
    print(f"max relative error {worst:.3e}")
    return EXIT_OK if worst < args.tol else EXIT_COMPUTE


def cmd_gen_fixtures(args, cfg):
    out = args.out
    os.makedirs(os.path.join(out, "scans"), exist_ok=True)
    tpl, _, base = fx.sphere_template(args.level, args.iterations)
    save_template(os.path.join(out, "template.obj"), tpl)
    save_template(os.path.join(out, "base.obj"), base)
    coeffs = fx.family_coeffs(args.count, args.seed)
    scans = []
    for i, c in enumerate(coeffs):
        pts = fx.bumpy_sphere_points(args.points, 1.0, args.amplitude, c)
        rel = os.path.join("scans", f"scan_{i:02d}.ply")
        write_ply(os.path.join(out, rel), pts)
        scans.append({"path": rel, "subject": f"subject_{i:02d}"})
    _write_json(os.path.join(out, "manifest.json"),
                {"template": "template.obj", "scans": scans, "output": "registered"})
    np.savetxt(os.path.join(out, "coeffs.txt"), coeffs, fmt="%.17g")
    log.info("wrote %d fixture scans to %s", len(scans), out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--workers", type=int, default=None, help="parallel jobs (results do not depend on it)")
    common.add_argument("--seed", type=int, default=None, help=f"random seed (default ${SEED_ENV} or 0)")
    common.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
    common.add_argument("--log-level", default="INFO")

    p = argparse.ArgumentParser(prog="uvdisp", description="UV displacement map toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        sp = sub.add_parser(name, parents=[common], help=help_text)
        sp.set_defaults(func=fn)
        return sp

    s = add("register", cmd_register, "two-stage registration of every scan in a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out")
    s.add_argument("--similarity", type=float, nargs=4, metavar=("S", "TX", "TY", "TZ"),
                   help="map scan points p -> S p + T before registration")

    s = add("register-partial", cmd_register_partial, "register a partial point cloud")
    s.add_argument("--template", required=True)
    s.add_argument("--cloud", required=True)
    s.add_argument("--out", required=True, help="output prefix")
    s.add_argument("--sparse", action="store_true", help="use the sparse-cloud proximity threshold")
    s.add_argument("--similarity", type=float, nargs=4, metavar=("S", "TX", "TY", "TZ"),
                   help="map cloud points p -> S p + T before registration")

    s = add("bake", cmd_bake, "bake displacements into a UV map")
    s.add_argument("--template", required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--disp", help="displacement table (.disp)")
    g.add_argument("--mesh", help="registered mesh with template topology")
    s.add_argument("--out", required=True)
    s.add_argument("--mask", help="per-vertex mask to bake as a binary image")
    s.add_argument("--mask-out")
    s.add_argument("--postprocess", action="store_true", help="also equalise seams and fill empty space")

    s = add("postprocess-uv", cmd_postprocess, "seam equalisation, blending and empty-space fill")
    s.add_argument("--template", required=True)
    s.add_argument("--map", required=True)
    s.add_argument("--out", required=True)

    s = add("fit-pca", cmd_fit_pca, "fit a linear model to UV maps")
    s.add_argument("--maps", nargs="*")
    s.add_argument("--list", help="text file with one map path per line")
    s.add_argument("--components", type=int)
    s.add_argument("--out", required=True)

    s = add("sample", cmd_sample, "draw maps from a linear model")
    s.add_argument("--model", required=True)
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--psi", type=float)
    s.add_argument("--format", choices=("raw", "png"), default="raw")
    s.add_argument("--out", required=True)

    s = add("fit-latent", cmd_fit_latent, "fit a latent code to a (masked) map")
    s.add_argument("--model", required=True)
    s.add_argument("--map", required=True)
    s.add_argument("--mask")
    s.add_argument("--iterative", action="store_true")
    s.add_argument("--out", required=True, help="latent code text file")
    s.add_argument("--map-out", help="write the reconstructed map")

    s = add("apply", cmd_apply, "displace a template with a UV map")
    s.add_argument("--template", required=True)
    s.add_argument("--map", required=True)
    s.add_argument("--out", required=True)

    s = add("animate", cmd_animate, "transfer a map onto a frame sequence")
    s.add_argument("--neutral", required=True)
    s.add_argument("--frames", nargs="+", required=True)
    s.add_argument("--map", required=True)
    s.add_argument("--iterations", type=int)
    s.add_argument("--out", required=True)

    s = add("metrics", cmd_metrics, "MMD / COV / JSD between generated and reference shapes")
    s.add_argument("--gen", nargs="+", required=True)
    s.add_argument("--ref", nargs="+", required=True)
    s.add_argument("--points", type=int)
    s.add_argument("--grid", type=int)
    s.add_argument("--subjects", help="JSON mapping reference file -> subject id")
    s.add_argument("--out", required=True)

    s = add("gradcheck", cmd_gradcheck, "finite-difference check of the registration loss")
    s.add_argument("--meshes", type=int, default=5)
    s.add_argument("--tol", type=float, default=1e-4)

    s = add("gen-fixtures", cmd_gen_fixtures, "write the synthetic sphere template and bumpy scans")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=8)
    s.add_argument("--points", type=int, default=10000)
    s.add_argument("--amplitude", type=float, default=0.15)
    s.add_argument("--level", type=int, default=2)
    s.add_argument("--iterations", type=int, default=2)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_level.upper())
    try:
        cfg = cfgmod.load_config(_need(args.config) if args.config else None)
        if args.seed is None:
            args.seed = default_seed() if SEED_ENV in os.environ or not args.config else cfg.seed
        cfg.seed = args.seed
        if args.workers is not None:
            if args.workers < 1:
                raise InputError("--workers must be >= 1")
            cfg.workers = args.workers
        if args.dry_run:
            sys.stdout.write(cfgmod.dump_config(cfg))
            return EXIT_OK
        return args.func(args, cfg)
    except (InputError, cfgmod.ConfigError, FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except Exception as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_COMPUTE


if __name__ == "__main__":
    sys.exit(main())
