"""Command-line pipeline: generate, train-ae, train-2d, reconstruct, evaluate, ablate.

Exit codes: 0 success, 2 configuration or input-validation error, 3 I/O
error, 4 missing prerequisite artifact, 5 diverged training.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from .autoencoder import (
    AutoencoderModel,
    autoencoder_container,
    load_autoencoder,
    mean_euclidean_error,
    state_from_tensors,
    state_tensors,
    train_stage1,
)
from .checkpoint import load_container, save_container
from .config import RunConfig, load_config
from .encoder2d import (
    encoder2d_container,
    load_encoder2d,
    params_digest,
    reconstruct_from_image,
    train_stage2,
)
from .errors import (
    CheckpointError,
    DegenerateLandmarks,
    DivergedLoss,
    EmptyMask,
    IoError,
    MgcnError,
    ParseError,
    ShapeMismatch,
)
from .evaluation import bidirectional_error, export_error_map, procrustes_align, region_mask_from_landmarks, save_report
from .mesh import TriangleMesh, landmark_sidecar, load_landmarks, load_mesh, save_mesh
from .sampling import build_hierarchy
from .synth import LinearShapeModel, build_toy_shape_model, generate_dataset, load_pgm, save_pgm, toy_base_mesh

log = logging.getLogger("mgcn")

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_MISSING = 4
EXIT_DIVERGED = 5


class MissingArtifact(MgcnError):
    pass


# artifact layout ----------------------------------------------------------------


def data_dir(cfg: RunConfig) -> Path:
    return cfg.out / "data"


def ae_dir(cfg: RunConfig) -> Path:
    return cfg.out / "autoencoder"


def enc_dir(cfg: RunConfig) -> Path:
    return cfg.out / "encoder2d"


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"{what} not found at {path}")
    return path


def _write_json(path: Path, data) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")
    os.replace(tmp, path)


# dataset storage ----------------------------------------------------------------


def write_dataset(cfg: RunConfig) -> Path:
    h, d = cfg.hierarchy, cfg.data
    if h.base_mesh is not None:
        base = load_mesh(h.base_mesh)
    else:
        base = toy_base_mesh(h.base_level, h.base_radius)
    model = build_toy_shape_model(base, d.num_modes, d.model_seed, d.vertex_rms, d.sigma_decay)
    rc = cfg.render.render_config()
    root = data_dir(cfg)
    root.mkdir(parents=True, exist_ok=True)
    save_mesh(base, root / "base.obj")
    save_container(root / "shape_model.mgcn", {"kind": "shape_model", "landmarks": [list(x) for x in base.landmarks]},
                   {"mean_shape": model.mean_shape, "modes": model.modes, "stddevs": model.stddevs,
                    "faces": model.faces})
    manifest = {"render": rc.to_json(), "base_mesh": "base.obj", "shape_model": "shape_model.mgcn", "splits": {}}
    for split, count, seed in (("train", d.train_count, d.train_seed), ("val", d.val_count, d.val_seed)):
        samples = generate_dataset(model, count, rc, seed)
        (root / split).mkdir(exist_ok=True)
        images = []
        for i, s in enumerate(samples):
            name = f"{split}/{i:05d}.pgm"
            save_pgm(root / name, s.image, rc.mode)
            images.append(name)
        shapes = np.array([s.shape for s in samples])
        coeffs = np.array([s.coefficients for s in samples]).reshape(count, d.num_modes)
        save_container(root / f"{split}_shapes.mgcn", {"kind": "shapes", "split": split, "seed": seed},
                       {"shapes": shapes, "coefficients": coeffs})
        manifest["splits"][split] = {"seed": seed, "count": count, "shapes": f"{split}_shapes.mgcn",
                                     "images": images, "coefficients": coeffs.tolist()}
    _write_json(root / "manifest.json", manifest)
    return root / "manifest.json"


def read_manifest(cfg: RunConfig) -> dict:
    path = _require(data_dir(cfg) / "manifest.json", "dataset manifest (run generate first)")
    return json.loads(path.read_text())


def read_base_mesh(cfg: RunConfig) -> TriangleMesh:
    return load_mesh(_require(data_dir(cfg) / "base.obj", "base mesh"))


def read_shape_model(cfg: RunConfig) -> LinearShapeModel:
    meta, t = load_container(_require(data_dir(cfg) / "shape_model.mgcn", "shape model"))
    return LinearShapeModel(t["mean_shape"], t["modes"], t["stddevs"], t["faces"], [tuple(x) for x in meta["landmarks"]])


def read_split(cfg: RunConfig, split: str, images=True):
    """``(shapes, images)`` of a split; images are decoded from the stored PGMs."""
    manifest = read_manifest(cfg)
    entry = manifest["splits"][split]
    _, t = load_container(_require(data_dir(cfg) / entry["shapes"], f"{split} shapes"))
    if not images:
        return t["shapes"], None
    mode = manifest["render"]["mode"]
    imgs = np.array([load_pgm(data_dir(cfg) / name, mode).pixels for name in entry["images"]])
    return t["shapes"], imgs


# commands -----------------------------------------------------------------------


def cmd_generate(cfg: RunConfig, args) -> int:
    path = write_dataset(cfg)
    print(json.dumps({"manifest": str(path)}))
    return 0


def _hierarchy(cfg: RunConfig):
    return build_hierarchy(read_base_mesh(cfg), cfg.hierarchy.factor, cfg.autoencoder.depth, cfg.seed)


def _save_state(path, state, extra_meta=None):
    tensors = {}
    meta = state_tensors(state, tensors)
    meta.update(extra_meta or {})
    save_container(path, meta, tensors)


def _load_state(path, expected_config):
    meta, tensors = load_container(path)
    if meta.get("config") != expected_config:
        raise CheckpointError(f"{path} was written with a different configuration")
    return state_from_tensors(meta, tensors)


def cmd_train_ae(cfg: RunConfig, args) -> int:
    train, _ = read_split(cfg, "train", images=False)
    val, _ = read_split(cfg, "val", images=False)
    hierarchy = _hierarchy(cfg)
    out = ae_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    state_path = out / "last_state.mgcn"
    conf = cfg.autoencoder.model_dump(mode="json")
    state = _load_state(state_path, conf) if args.resume and state_path.exists() else None

    def on_epoch(s):
        _save_state(state_path, s, {"config": conf})

    model, history, state = train_stage1(train, val, cfg.autoencoder, hierarchy, state=state,
                                         stop_after=args.stop_after, deterministic=args.deterministic,
                                         on_epoch=on_epoch)
    _write_json(out / "history.json", history.to_json())
    save_container(out / "autoencoder.mgcn", *autoencoder_container(model, {"best_epoch": state.best_epoch}))
    print(json.dumps({"best_epoch": state.best_epoch, "best_val_mee": state.best_val,
                      "epochs_completed": state.next_epoch}))
    return 0


def _load_ae(cfg: RunConfig) -> AutoencoderModel:
    return load_autoencoder(_require(ae_dir(cfg) / "autoencoder.mgcn", "stage-1 checkpoint (run train-ae first)"))


def cmd_train_2d(cfg: RunConfig, args) -> int:
    ae = _load_ae(cfg)
    train_shapes, train_imgs = read_split(cfg, "train")
    val_shapes, val_imgs = read_split(cfg, "val")
    digest = params_digest(ae.params)
    latents = ae.encode(train_shapes)
    out = enc_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    state_path = out / "last_state.mgcn"
    conf = cfg.encoder2d.model_dump(mode="json")
    state = _load_state(state_path, conf) if args.resume and state_path.exists() else None

    def on_epoch(s):
        _save_state(state_path, s, {"config": conf})

    model, history, state = train_stage2(train_imgs, latents, val_imgs, val_shapes, cfg.encoder2d, ae, state=state,
                                         stop_after=args.stop_after, deterministic=args.deterministic,
                                         on_epoch=on_epoch)
    if params_digest(ae.params) != digest:
        raise RuntimeError("frozen decoder parameters changed during stage-2 training")
    render_mode = read_manifest(cfg)["render"]["mode"]
    _write_json(out / "history.json", history.to_json())
    save_container(out / "encoder2d.mgcn", *encoder2d_container(
        model, {"best_epoch": state.best_epoch, "render_mode": render_mode, "decoder_digest": digest}))
    print(json.dumps({"best_epoch": state.best_epoch, "best_val_mee": state.best_val,
                      "epochs_completed": state.next_epoch}))
    return 0


def cmd_reconstruct(cfg: RunConfig, args) -> int:
    ae = _load_ae(cfg)
    enc_path = _require(enc_dir(cfg) / "encoder2d.mgcn", "stage-2 checkpoint (run train-2d first)")
    meta, _ = load_container(enc_path)
    encoder = load_encoder2d(enc_path)
    image = load_pgm(args.image, meta.get("render_mode", "grayscale"))
    t0 = time.perf_counter()
    verts = reconstruct_from_image(encoder, ae, image)
    elapsed = time.perf_counter() - t0
    base = ae.hierarchy.levels[0]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_mesh(TriangleMesh(verts, base.faces, base.landmarks), out)
    latent = encoder.encode(image)[0]
    print(json.dumps({"output": str(out), "latent": latent.tolist(), "seconds": elapsed}))
    return 0


def _mesh_with_landmarks(path) -> TriangleMesh:
    mesh = load_mesh(path)
    if not mesh.landmarks:
        side = landmark_sidecar(path)
        if not side.exists():
            raise DegenerateLandmarks(f"{path} has no landmark sidecar {side.name}")
        mesh.landmarks = load_landmarks(side)
    return mesh


def cmd_evaluate(cfg: RunConfig | None, args) -> int:
    ev = cfg.eval if cfg is not None else None
    margin = args.margin if args.margin is not None else (ev.margin if ev else 10.0)
    cap = args.cap if args.cap is not None else (ev.cap if ev else 5.0)
    similarity = args.similarity or (ev.similarity if ev else False)
    recon = _mesh_with_landmarks(args.recon)
    scan = _mesh_with_landmarks(args.scan)
    if args.landmarks:
        names = args.landmarks.split(",")
    elif ev is not None and ev.landmarks:
        names = ev.landmarks
    else:
        scan_names = dict(scan.landmarks)
        names = [n for n, _ in recon.landmarks if n in scan_names]
    missing = [n for n in names if n not in dict(recon.landmarks) or n not in dict(scan.landmarks)]
    if missing:
        raise DegenerateLandmarks(f"landmarks missing on one of the meshes: {missing}")
    if len(names) < 3:
        raise DegenerateLandmarks(f"need at least 3 shared landmarks, got {len(names)}")
    transform = procrustes_align(recon.landmark_positions(names), scan.landmark_positions(names), similarity)
    aligned = TriangleMesh(transform.apply(recon.vertices), recon.faces, recon.landmarks)
    mask = region_mask_from_landmarks(aligned, scan.landmark_positions(names), margin)
    meta = {"reconstruction": str(args.recon), "scan": str(args.scan), "landmarks": names,
            "transform": transform.to_json(), "margin": margin, "cap": cap}
    report = bidirectional_error(aligned, scan, mask, meta)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_report(report, out)
    error_map = Path(args.error_map) if args.error_map else out.with_name(out.stem + "_errors.ply")
    export_error_map(aligned, report.per_vertex, error_map, cap)
    print(json.dumps({"report": str(out), "error_map": str(error_map), "combined": report.combined}))
    return 0


def _parse_sweep(sweep: str, values: str):
    if sweep == "tap_sets":
        out = []
        for item in values.split(";"):
            item = item.strip()
            out.append([] if item in ("", "none") else [int(v) for v in item.split(",")])
        return out
    return [int(v) for v in values.split(",")]


def per_sample_mee(pred, truth) -> np.ndarray:
    return np.array([mean_euclidean_error(p, t) for p, t in zip(pred, truth)])


def ablation_rows(cfg: RunConfig, sweep: str, values, deterministic=True):
    """One row per sweep value with the mean and std of per-sample validation MEE."""
    rows = []
    if sweep in ("latent_sizes", "cheb_orders"):
        train, _ = read_split(cfg, "train", images=False)
        val, _ = read_split(cfg, "val", images=False)
        hierarchy = _hierarchy(cfg)
        key = "latent_size" if sweep == "latent_sizes" else "cheb_order"
        for v in values:
            conf = cfg.autoencoder.model_copy(update={key: v})
            model, _, state = train_stage1(train, val, conf, hierarchy, deterministic=deterministic)
            errs = per_sample_mee(model.reconstruct(val), val)
            rows.append((sweep, str(v), errs.mean(), errs.std(ddof=1) if len(errs) > 1 else 0.0, len(errs),
                         state.best_epoch))
    elif sweep == "tap_sets":
        ae = _load_ae(cfg)
        train_shapes, train_imgs = read_split(cfg, "train")
        val_shapes, val_imgs = read_split(cfg, "val")
        latents = ae.encode(train_shapes)
        for taps in values:
            conf = cfg.encoder2d.model_copy(update={"taps": taps})
            conf = type(conf).model_validate(conf.model_dump())
            model, _, state = train_stage2(train_imgs, latents, val_imgs, val_shapes, conf, ae,
                                           deterministic=deterministic)
            errs = per_sample_mee(ae.decode(model.encode(val_imgs)), val_shapes)
            label = "none" if not taps else "+".join(str(t) for t in taps)
            rows.append((sweep, label, errs.mean(), errs.std(ddof=1) if len(errs) > 1 else 0.0, len(errs),
                         state.best_epoch))
    else:
        raise ValueError(f"unknown sweep {sweep!r}")
    return rows


CSV_HEADER = ("sweep", "value", "val_mee_mean", "val_mee_std", "val_count", "best_epoch")


def cmd_ablate(cfg: RunConfig, args) -> int:
    try:
        values = _parse_sweep(args.sweep, args.values)
    except ValueError as exc:
        raise ValueError(f"bad --values for {args.sweep}: {exc}") from None
    rows = ablation_rows(cfg, args.sweep, values, args.deterministic)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in rows:
        writer.writerow([r[0], r[1], f"{r[2]:.6f}", f"{r[3]:.6f}", r[4], r[5]])
    out = Path(args.out) if args.out else cfg.out / f"ablation_{args.sweep}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_name(out.name + ".tmp")
    tmp.write_text(buf.getvalue())
    os.replace(tmp, out)
    sys.stdout.write(buf.getvalue())
    return 0


# entry point --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None,
                        help="BLAS thread count (default: $MGCN_THREADS, else library default)")
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded, no wall-clock times in histories")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mgcn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, needs_config=True, **kw):
        p = sub.add_parser(name, parents=[common], **kw)
        p.add_argument("--config", required=needs_config, help="run configuration JSON")
        return p

    add("generate", help="sample shapes and render images")
    for name in ("train-ae", "train-2d"):
        p = add(name, help=f"{'stage-1 autoencoder' if name == 'train-ae' else 'stage-2 image encoder'} training")
        p.add_argument("--resume", action="store_true", help="continue from the last epoch checkpoint")
        p.add_argument("--stop-after", type=int, default=None, help="stop after this many epochs in this call")
    p = add("reconstruct", help="mesh from an image")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p = add("evaluate", needs_config=False, help="score a reconstruction against a scan")
    p.add_argument("--recon", required=True)
    p.add_argument("--scan", required=True)
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--error-map", default=None, help="coloured PLY path")
    p.add_argument("--landmarks", default=None, help="comma-separated landmark names")
    p.add_argument("--margin", type=float, default=None)
    p.add_argument("--cap", type=float, default=None)
    p.add_argument("--similarity", action="store_true", help="fit a uniform scale as well")
    p = add("ablate", help="validation MEE for a sweep of one setting")
    p.add_argument("--sweep", required=True, choices=["latent_sizes", "cheb_orders", "tap_sets"])
    p.add_argument("--values", required=True, help="e.g. 4,16 or, for tap_sets, 'none;0,1'")
    p.add_argument("--out", default=None, help="CSV path")
    return parser


COMMANDS = {
    "generate": cmd_generate,
    "train-ae": cmd_train_ae,
    "train-2d": cmd_train_2d,
    "reconstruct": cmd_reconstruct,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


def _thread_count(args):
    if args.deterministic:
        return 1
    if args.threads is not None:
        return args.threads
    env = os.environ.get("MGCN_THREADS")
    return int(env) if env else None


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        threads = _thread_count(args)
    except ValueError:
        print("error: MGCN_THREADS must be an integer", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config) if args.config else None
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValidationError, ValueError) as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if threads is not None:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=threads):
                return COMMANDS[args.command](cfg, args)
        return COMMANDS[args.command](cfg, args)
    except MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except DivergedLoss as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ParseError, CheckpointError, IoError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ShapeMismatch, DegenerateLandmarks, EmptyMask, ValidationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
