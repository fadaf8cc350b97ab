"""``ggf`` command line tool.

Exit codes: 0 success, 2 invalid input, 3 numerical divergence.

Frames directory layout (as written by ``make-scene``)::

    frames/frame_0000/cam_00.png   (or .pfm)
                      mask_00.png  (optional)
                      body.ply     (optional)
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from .asset import load_asset, read_sequence, save_asset, write_sequence
from .energies import MaterialParams
from .errors import DivergenceError, ValidationError
from .images import read_image, read_mask, write_image
from .meshio import load_mesh, save_mesh
from .metrics import chamfer_p2m_fscore, psnr_ssim
from .registration import (AppearanceConfig, FrameObservation, RegistrationConfig, init_appearance,
                           register_sequence)
from .render import load_cameras, rasterize, save_cameras, visibility_mask
from .scenes import SCENE_KINDS, make_synthetic_scene
from .simulator import (BodyMotion, Garment, MaterialField, RestGeometry, SimConfig, SimState, fit_behavior,
                        relax, resize, simulate, untangle_all, untangle_config)
from .texture import attach, bind_texture, initial_texture

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("ggf")

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED = 0, 2, 3
IMAGE_SUFFIXES = (".png", ".pfm")


# ------------------------------------------------------------------ config

def load_config(path, section: str) -> dict:
    """Top-level keys of a TOML file, or the ``[section]`` table when present."""
    if path is None:
        return {}
    try:
        with open(path, "rb") as f:
            doc = tomllib.load(f)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from exc
    if section in doc and isinstance(doc[section], dict):
        return dict(doc[section])
    return {k: v for k, v in doc.items() if not isinstance(v, dict) or k == "material"}


def build_config(cls, d: dict):
    names = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(names)
    if unknown:
        raise ValidationError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kw = {}
    for k, v in d.items():
        if k == "material" and isinstance(v, dict):
            v = MaterialParams(**v)
        elif isinstance(v, list):
            v = tuple(v)
        kw[k] = v
    try:
        return cls(**kw)
    except TypeError as exc:
        raise ValidationError(str(exc)) from exc


# ------------------------------------------------------------------ frames

def _frame_dirs(frames_dir) -> list:
    root = Path(frames_dir)
    if not root.is_dir():
        raise ValidationError(f"{root} is not a directory")
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and p.name.startswith("frame_"))
    if not dirs:
        raise ValidationError(f"{root} contains no frame_XXXX directories")
    return dirs


def _find_image(d: Path, stem: str):
    for suf in IMAGE_SUFFIXES[::-1]:  # prefer lossless float images
        p = d / f"{stem}{suf}"
        if p.is_file():
            return p
    return None


def load_frames(frames_dir, cameras) -> list:
    obs = []
    for d in _frame_dirs(frames_dir):
        images, masks = [], []
        for k in range(len(cameras)):
            p = _find_image(d, f"cam_{k:02d}")
            if p is None:
                raise ValidationError(f"{d} has no image for camera {k}")
            images.append(read_image(p))
            m = d / f"mask_{k:02d}.png"
            masks.append(read_mask(m) if m.is_file() else None)
        if any(m is None for m in masks):
            masks = None
        body = load_mesh(d / "body.ply", validate_uvs=False) if (d / "body.ply").is_file() else None
        obs.append(FrameObservation(images, cameras, masks, body))
    return obs


def write_frames(out_dir, images, masks, bodies=None, fmt: str = "png") -> None:
    out_dir = Path(out_dir)
    for t, frame in enumerate(images):
        d = out_dir / f"frame_{t:04d}"
        d.mkdir(parents=True, exist_ok=True)
        for k, im in enumerate(frame):
            write_image(d / f"cam_{k:02d}.{fmt}", im)
            if masks:
                write_image(d / f"mask_{k:02d}.png", np.repeat(masks[t][k][..., None].astype(float), 3, axis=2))
        if bodies is not None:
            save_mesh(bodies[t], d / "body.ply")


def load_body_motion(path) -> BodyMotion:
    root = Path(path)
    if root.is_file():
        return BodyMotion([load_mesh(root, validate_uvs=False)])
    if not root.is_dir():
        raise ValidationError(f"{root} does not exist")
    files = sorted(d / "body.ply" for d in root.iterdir() if d.is_dir() and (d / "body.ply").is_file())
    if not files:
        files = sorted(root.glob("*.ply")) + sorted(root.glob("*.obj"))
    if not files:
        raise ValidationError(f"{root} holds no body meshes")
    return BodyMotion([load_mesh(f, validate_uvs=False) for f in files])


def load_scale_field(path, n: int) -> np.ndarray:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read scale field {path}: {exc}") from exc
    if isinstance(doc, dict):
        doc = doc.get("scale", doc.get("values"))
    if isinstance(doc, (int, float)):
        return np.full(n, float(doc))
    if doc is None:
        raise ValidationError(f"{path}: expected a number, a list or an object with 'scale'")
    return np.asarray(doc, dtype=np.float64)


def _emit(result: dict) -> None:
    print(json.dumps(result, indent=1, default=float))


# ---------------------------------------------------------------- commands

def cmd_make_scene(a):
    opts = {}
    if a.frames is not None:
        opts["n_frames"] = a.frames
    sc = make_synthetic_scene(a.kind, a.seed, **opts)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    save_cameras(sc.cameras, out / "cameras.json")
    bodies = [sc.body_motion[t] for t in range(len(sc.images))] if sc.body_motion is not None else None
    write_frames(out / "frames", sc.images, sc.masks, bodies, a.format)
    write_sequence(sc.gt_positions, out / "gt.bin")
    save_asset(sc.garment, sc.texture, sc.rest, sc.material, out / "asset")
    if "template_body" in sc.extra:
        save_mesh(sc.extra["template_body"], out / "template_body.ply")
    if "garments" in sc.extra:
        for i, g in enumerate(sc.extra["garments"]):
            save_asset(g.mesh, initial_texture(g.mesh, 16), g.rest, g.material, out / f"garment_{i}")
        save_mesh(sc.extra["body"], out / "body.ply")
    meta = {"kind": sc.kind, "seed": sc.seed, "n_frames": sc.n_frames, "digest": sc.digest()}
    if "pins" in sc.extra:
        meta["pins"] = [int(i) for i in sc.extra["pins"]]
    (out / "scene.json").write_text(json.dumps(meta, indent=1))
    _emit(meta)


def cmd_register(a):
    d = load_config(a.config, "register")
    if a.seed is not None:
        d["seed"] = a.seed
    cfg = RegistrationConfig.from_dict(d)
    asset = load_asset(a.asset)
    cams = load_cameras(a.cameras)
    obs = load_frames(a.frames, cams)
    template = asset.mesh.with_positions(asset.mesh.rest)
    tbody = load_mesh(a.template_body, validate_uvs=False) if a.template_body else None
    res = register_sequence(template, asset.texture, obs, cfg, template_body=tbody)
    write_sequence(np.stack(res.positions), a.out)
    _emit({"frames": len(res), "final_loss": [r.get("total") for r in res.losses]})


def cmd_bake(a):
    d = load_config(a.config, "bake")
    cfg = build_config(AppearanceConfig, d)
    if a.iterations is not None:
        cfg = replace(cfg, iterations=a.iterations)
    mesh = load_mesh(a.mesh)
    cams = load_cameras(a.cameras)
    obs = load_frames(a.frames, cams)[a.frame]
    h = a.texture_size[0]
    w = a.texture_size[1] if len(a.texture_size) > 1 else h
    texture, rep = init_appearance(obs, mesh, (h, w), cfg, return_report=True)
    save_asset(mesh, texture, RestGeometry.from_mesh(mesh), MaterialField.uniform(mesh.n_vertices), a.out)
    _emit({"asset": str(a.out), "masked_l1": rep["masked_l1"], "valid_texels": texture.n_valid})


def cmd_render(a):
    asset = load_asset(a.asset)
    cams = load_cameras(a.cameras)
    if not 0 <= a.view < len(cams):
        raise ValidationError(f"view {a.view} out of range for {len(cams)} cameras")
    mesh = asset.mesh
    if a.sequence:
        seq = read_sequence(a.sequence)
        if not 0 <= a.frame < len(seq):
            raise ValidationError(f"frame {a.frame} out of range for {len(seq)} frames")
        mesh = mesh.with_positions(seq[a.frame])
    binding = bind_texture(asset.texture, mesh)
    ag = attach(asset.texture, binding, mesh)
    cam = cams[a.view]
    vis = None
    if a.body:
        vis = visibility_mask(ag, [load_mesh(a.body, validate_uvs=False)], cam)
    img = rasterize(ag, cam, tuple(a.background), visible=vis)
    write_image(a.out, img.rgb)
    _emit({"out": str(a.out), "coverage": float(img.alpha.mean())})


def _sim_config(a, section="simulate") -> SimConfig:
    return build_config(SimConfig, load_config(a.config, section))


def cmd_simulate(a):
    asset = load_asset(a.asset)
    cfg = _sim_config(a)
    motion = load_body_motion(a.body_motion) if a.body_motion else None
    n = a.frames if a.frames is not None else (len(motion) - 1 if motion is not None else 30)
    seq = simulate(SimState.at_rest(asset.mesh.vertices), asset.material, asset.rest, motion, n, cfg)
    write_sequence(seq, a.out)
    _emit({"frames": len(seq), "vertices": seq.shape[1]})


def cmd_untangle(a):
    cfg = _sim_config(a, "untangle")
    assets = [load_asset(p) for p in a.assets]
    body = load_mesh(a.body, validate_uvs=False) if a.body else None
    garments = [Garment(s.mesh, s.rest, s.material) for s in assets]
    out = untangle_all(garments, body, a.epochs, cfg, a.frames_per_stage)
    out_dir = Path(a.out_dir)
    written = []
    for src, s, g in zip(a.assets, assets, out):
        p = out_dir / Path(src).name
        save_asset(g.mesh, s.texture, s.rest, s.material, p)
        written.append(str(p))
    _emit({"assets": written, "config": asdict(untangle_config(cfg))})


def cmd_resize(a):
    asset = load_asset(a.asset)
    field = load_scale_field(a.scale_field, asset.mesh.n_vertices)
    rest = resize(asset.rest, field)
    cfg = replace(_sim_config(a, "resize"), gravity=(0.0, 0.0, 0.0))
    x = asset.mesh.vertices
    if a.relax_frames > 0:
        x = relax(x, asset.material, rest, a.relax_frames, cfg)
    save_asset(asset.mesh.with_positions(x), asset.texture, rest, asset.material, a.out)
    _emit({"asset": str(a.out), "mean_scale": float(np.mean(field))})


def load_pins(spec):
    """Pinned vertex indices from ``"0,1,2"``, a JSON list file, or a scene.json with a ``pins`` key."""
    if spec is None:
        return None
    path = Path(spec)
    if path.is_file():
        doc = json.loads(path.read_text())
        doc = doc.get("pins", []) if isinstance(doc, dict) else doc
        return np.asarray(doc, dtype=np.int64)
    try:
        return np.asarray([int(t) for t in spec.split(",") if t.strip()], dtype=np.int64)
    except ValueError:
        raise ValidationError(f"--pins must be a comma list of indices or a JSON file, got {spec!r}") from None


def cmd_fit_behavior(a):
    asset = load_asset(a.asset)
    cfg = _sim_config(a, "fit-behavior")
    seq = read_sequence(a.tracked)
    motion = load_body_motion(a.body_motion) if a.body_motion else None
    mat, rest, rep = fit_behavior(seq, motion, asset.material, asset.rest, cfg, max_evals=a.max_evals,
                                  return_report=True, pin_indices=load_pins(a.pins), method=a.method)
    save_asset(asset.mesh, asset.texture, rest, mat, a.out)
    _emit({"asset": str(a.out), "initial_l2": rep.initial_l2, "final_l2": rep.final_l2,
           "evaluations": rep.evaluations, "material_log_multipliers": rep.params.log_material.tolist()})


def _load_geometry(path, frame, faces_from):
    p = Path(path)
    if p.suffix == ".bin":
        if faces_from is None:
            raise ValidationError("--mesh is required to evaluate a vertex sequence")
        seq = read_sequence(p)
        if not 0 <= frame < len(seq):
            raise ValidationError(f"frame {frame} out of range for {p}")
        return load_mesh(faces_from, validate_uvs=False).with_positions(seq[frame])
    if p.suffix == ".npy":
        return np.load(p)
    return load_mesh(p, validate_uvs=False)


def cmd_eval(a):
    if Path(a.pred).suffix in IMAGE_SUFFIXES and Path(a.gt).suffix in IMAGE_SUFFIXES:
        p, s = psnr_ssim(read_image(a.pred), read_image(a.gt))
        _emit({"psnr": p, "ssim": s})
        return
    pred = _load_geometry(a.pred, a.frame, a.mesh)
    gt = _load_geometry(a.gt, a.frame, a.mesh)
    cd, p2m, f = chamfer_p2m_fscore(pred, gt, a.threshold, a.samples, a.seed)
    _emit({"chamfer_cm": cd, "p2m_cm": p2m, "fscore_pct": f, "threshold_cm": a.threshold})


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ggf", description="Garment assets from multi-view video.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="TOML configuration file")
        p.add_argument("--seed", type=int, default=None)
        p.set_defaults(fn=fn)
        return p

    p = add("make-scene", cmd_make_scene, "write a synthetic test scene")
    p.add_argument("--kind", required=True, choices=SCENE_KINDS)
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int)
    p.add_argument("--format", choices=("png", "pfm"), default="png")

    p = add("register", cmd_register, "track an asset through multi-view frames")
    p.add_argument("--asset", required=True)
    p.add_argument("--frames", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--template-body")

    p = add("bake", cmd_bake, "optimize a Gaussian texture on a template mesh")
    p.add_argument("--mesh", required=True)
    p.add_argument("--frames", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--texture-size", type=int, nargs="+", default=[512])
    p.add_argument("--iterations", type=int)

    p = add("render", cmd_render, "render one camera view of an asset")
    p.add_argument("--asset", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--view", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sequence")
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--body")
    p.add_argument("--background", type=float, nargs=3, default=[0.0, 0.0, 0.0])

    p = add("simulate", cmd_simulate, "simulate an asset over a body motion")
    p.add_argument("--asset", required=True)
    p.add_argument("--body-motion")
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int)

    p = add("untangle", cmd_untangle, "fix layer order of garments (innermost first)")
    p.add_argument("--assets", nargs="+", required=True)
    p.add_argument("--body")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--epochs", type=int, default=2)
    p.add_argument("--frames-per-stage", type=int, default=30)

    p = add("resize", cmd_resize, "rescale rest edge lengths and relax")
    p.add_argument("--asset", required=True)
    p.add_argument("--scale-field", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--relax-frames", type=int, default=200)

    p = add("fit-behavior", cmd_fit_behavior, "fit material and rest scale to a tracked sequence")
    p.add_argument("--asset", required=True)
    p.add_argument("--tracked", required=True)
    p.add_argument("--body-motion")
    p.add_argument("--out", required=True)
    p.add_argument("--max-evals", type=int, default=200)
    p.add_argument("--pins", help="pinned vertices: comma list, JSON list file, or scene.json")
    p.add_argument("--method", choices=("lsq", "coordinate"), default="lsq")

    p = add("eval", cmd_eval, "geometry or image metrics")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--mesh", help="mesh supplying faces when --pred/--gt are sequences")
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--threshold", type=float, default=1.0, help="F-score threshold in cm")
    p.add_argument("--samples", type=int, default=10_000)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.seed is None and args.command in ("make-scene", "eval"):
        args.seed = 0
    try:
        args.fn(args)
    except DivergenceError as exc:
        print(f"ggf: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ValidationError, FileNotFoundError) as exc:
        print(f"ggf: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
