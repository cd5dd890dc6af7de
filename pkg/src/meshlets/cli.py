"""Command-line entry point: ``meshlets <command> [options]``.

Exit codes: 0 success, 2 usage or configuration error, 3 unreadable or
invalid input, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import datasets
from .errors import (CheckpointError, ConfigError, CoverageImpossible, EmptyInputError,
                     MeshletError, NonFiniteError, NoTargetsError, ParseError, RemeshFailure)
from .fitting import FitConfig, fit_least_squares, fit_meshlet_to_points, plane_meshlet
from .io import load_mesh, load_points, save_mesh, save_points
from .mesh import TriMesh, normalize_unit_cube
from .meshlet import footprint_scale
from .pipeline import ReconConfig, reconstruct
from .shapes import BUILTIN
from .spatial import chamfer_l1, hausdorff_sym
from .vae import TrainConfig, load_checkpoint, save_checkpoint, train

EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_NUMERIC = 4

EVAL_HEADER = ["object", "setting", "chamfer_l1_x100", "hausdorff_x100", "runtime_s"]

logger = logging.getLogger("meshlets")


class _Usage(Exception):
    pass


class _Log:
    """Progress sink: JSON lines on stdout with ``--json``, plain log lines otherwise."""

    def __init__(self, as_json: bool):
        self.as_json = as_json

    def __call__(self, event: str, **data):
        rec = {"event": event, **data}
        if self.as_json:
            sys.stdout.write(json.dumps(rec, sort_keys=True, default=_jsonable) + "\n")
            sys.stdout.flush()
        else:
            logger.info("%s %s", event, " ".join(f"{k}={v}" for k, v in data.items()))


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    return str(x)


def _dataclass_from(cls, d: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    for k in d:
        if k not in names:
            raise ConfigError(f"unknown config key {k!r}", k)
    try:
        return cls(**d)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), next(iter(d), "")) from exc


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}", "") from exc
    if not isinstance(d, dict):
        raise ConfigError(f"config {path} must hold a JSON object", "")
    return d


def _load_mesh_arg(source: str) -> tuple[str, TriMesh]:
    """``builtin:<name>`` or a mesh path; returns (object name, mesh)."""
    if source.startswith("builtin:"):
        name = source.split(":", 1)[1]
        if name not in BUILTIN:
            raise _Usage(f"unknown builtin mesh {name!r}; choose from {', '.join(sorted(BUILTIN))}")
        return name, BUILTIN[name]()
    return Path(source).stem, load_mesh(source)


# *** commands ***

def cmd_make_pc(args, log: _Log) -> int:
    _, mesh = _load_mesh_arg(args.input)
    if args.normalize:
        mesh, _ = normalize_unit_cube(mesh)
    setting = datasets.SETTINGS[args.setting].with_seed(args.seed)
    pc = datasets.make_pointcloud(mesh, setting)
    save_points(pc, args.out)
    log("make_pc", points=len(pc), setting=args.setting, seed=args.seed, out=str(args.out))
    return 0


def cmd_build_corpus(args, log: _Log) -> int:
    opts = {"per_scale": 256, "scales": [1.0, 2.0, 4.0], "spacing": datasets.DESK_SPACING,
            "grid_size": datasets.DESK_GRID, "max_stretch": 2.0, "max_stretch_fraction": 0.1,
            "synthetic": 0}
    cfg = _read_config(args.config)
    for k in cfg:
        if k not in opts:
            raise ConfigError(f"unknown config key {k!r}", k)
    opts.update(cfg)
    for k in ("per_scale", "spacing", "grid_size", "synthetic"):
        v = getattr(args, k)
        if v is not None:
            opts[k] = v
    if not args.sources and not opts["synthetic"]:
        raise _Usage("give mesh sources and/or --synthetic N")
    out = Path(args.out)
    stats: dict = {"meshlets": 0}
    if args.sources:
        sources = [_load_mesh_arg(s)[1] for s in args.sources]
        stats = datasets.build_corpus(sources, out, per_scale=opts["per_scale"],
                                      scales=tuple(opts["scales"]), spacing=opts["spacing"],
                                      grid_size=opts["grid_size"], seed=args.seed,
                                      max_stretch=opts["max_stretch"],
                                      max_stretch_fraction=opts["max_stretch_fraction"])
    if opts["synthetic"]:
        from .meshlet import read_mlc, write_mlc
        g, v = datasets.synthetic_corpus(opts["synthetic"], seed=args.seed,
                                         grid_size=opts["grid_size"], spacing=opts["spacing"])
        if args.sources:
            g0, v0 = read_mlc(out)
            g, v = np.concatenate([g0, g]), np.concatenate([v0, v])
        write_mlc(out, g, v)
        stats["synthetic"] = opts["synthetic"]
        stats["meshlets"] = len(g)
    Path(str(out) + ".stats.json").write_text(json.dumps(stats, indent=2))
    log("build_corpus", out=str(out), **{k: stats[k] for k in ("meshlets",)})
    return 0


def cmd_train(args, log: _Log) -> int:
    d = _read_config(args.config)
    d.setdefault("seed", args.seed)
    for k in ("epochs", "batch_size", "lr", "beta"):
        v = getattr(args, k)
        if v is not None:
            d[k] = v
    cfg = _dataclass_from(TrainConfig, d)
    t0 = time.perf_counter()

    def on_epoch(epoch, loss):
        log("epoch", epoch=epoch + 1, loss=float(loss), seconds=time.perf_counter() - t0)

    model = train(args.corpus, cfg, on_epoch=on_epoch)
    save_checkpoint(model, args.out)
    log("train", out=str(args.out), input_dim=model.input_dim, latent_dim=model.latent_dim,
        final_loss=float(model.history[-1]))
    return 0


def cmd_fit_patch(args, log: _Log) -> int:
    model = load_checkpoint(args.model)
    pts = load_points(args.points).points
    d = _read_config(args.config)
    if args.steps is not None:
        d["steps"] = args.steps
    cfg = _dataclass_from(FitConfig, d)
    n = model.grid_size
    spacing = args.spacing
    if spacing is None:
        # footprint half-width covers the patch radius around its centroid
        r = np.max(np.linalg.norm(pts - pts.mean(axis=0), axis=1))
        spacing = r / max(n // 2, 1) / np.sqrt(2.0)
    start = plane_meshlet(pts, spacing, n)
    fitted = fit_meshlet_to_points(model, start, pts, cfg)
    save_points(fitted.grid.reshape(-1, 3), args.out)
    rec = {"out": str(args.out), "grid_size": n, "spacing": float(spacing),
           "footprint": footprint_scale(spacing, n)}
    if args.gt is not None:
        gt = load_points(args.gt).points
        rec["hausdorff_prior"] = hausdorff_sym(fitted.grid.reshape(-1, 3), gt)
        ls = fit_least_squares(start, pts)
        rec["hausdorff_lsq"] = hausdorff_sym(ls.grid.reshape(-1, 3), gt)
    log("fit_patch", **rec)
    return 0


def cmd_reconstruct(args, log: _Log) -> int:
    pc = load_points(args.points)
    model = load_checkpoint(args.model)
    d = _read_config(args.config)
    d.setdefault("seed", args.seed)
    if args.max_outer is not None:
        d["max_outer"] = args.max_outer
    if args.inner_iterations is not None:
        d["inner_iterations"] = args.inner_iterations
    cfg = ReconConfig.from_dict(d)
    if model.grid_size != cfg.grid_size:
        raise ConfigError(f"model grid size {model.grid_size} differs from config grid_size "
                          f"{cfg.grid_size}", "grid_size")
    gt = load_points(args.gt).points if args.gt is not None else None

    def on_event(ev):
        if ev["event"] in ("outer", "resample", "init", "reverted", "remesh_failure", "no_progress"):
            log(ev["event"], **{k: v for k, v in ev.items() if k != "event"})

    t0 = time.perf_counter()
    mesh, state = reconstruct(pc, model, cfg, gt=gt, checkpoint_dir=args.checkpoint_dir,
                              on_event=on_event)
    runtime = time.perf_counter() - t0
    save_mesh(mesh, args.out)
    meta = {"runtime_s": runtime, "outer": state.outer, "cpc_history": state.cpc_history,
            "vertices": mesh.n_vertices, "config": cfg.to_dict()}
    if args.setting:
        meta["setting"] = args.setting
    Path(str(args.out) + ".json").write_text(json.dumps(meta, indent=2))
    log("reconstruct", out=str(args.out), vertices=mesh.n_vertices, outer=state.outer,
        cpc=state.cpc_history[-1], runtime_s=runtime)
    return 0


def evaluate_pair(gt: TriMesh, recon: TriMesh) -> tuple[float, float]:
    """Vertex-set Chamfer-l1 and symmetric Hausdorff, both scaled by 100."""
    a, b = gt.vertices, recon.vertices
    return 100.0 * chamfer_l1(a, b), 100.0 * hausdorff_sym(a, b)


def _sidecar(path: Path) -> dict:
    p = Path(str(path) + ".json")
    if p.exists():
        try:
            return json.loads(p.read_text())
        except json.JSONDecodeError:
            return {}
    return {}


def evaluation_rows(gt_arg: str, recon: str, name=None, setting=None) -> list[list]:
    rpath = Path(recon)
    if recon.startswith("builtin:"):
        files = [recon]
    elif rpath.is_dir():
        files = sorted(p for p in rpath.iterdir() if p.suffix.lower() in (".ply", ".obj"))
        if not files:
            raise EmptyInputError(f"no .ply/.obj meshes in {rpath}")
    else:
        files = [rpath]
    gpath = Path(gt_arg)
    rows = []
    for f in files:
        fname = Path(f).stem if not str(f).startswith("builtin:") else str(f).split(":", 1)[1]
        if gpath.is_dir():
            cands = [gpath / (fname + ext) for ext in (".ply", ".obj")]
            hit = [c for c in cands if c.exists()]
            if not hit:
                raise FileNotFoundError(f"no ground truth for {fname} in {gpath}")
            obj, gt = fname, load_mesh(hit[0])
        else:
            obj, gt = _load_mesh_arg(gt_arg)
            if len(files) > 1:
                obj = fname
        if name is not None and len(files) == 1:
            obj = name
        _, rec = _load_mesh_arg(str(f))
        meta = {} if str(f).startswith("builtin:") else _sidecar(Path(f))
        cd, hd = evaluate_pair(gt, rec)
        rows.append([obj, setting or meta.get("setting", ""), cd, hd,
                     float(meta.get("runtime_s", float("nan")))])
    return rows


def _footer(rows) -> list[list]:
    arr = np.array([r[2:] for r in rows], dtype=float)
    out = []
    for label, fn in (("mean", np.nanmean), ("median", np.nanmedian)):
        vals = []
        for j in range(arr.shape[1]):
            col = arr[:, j]
            vals.append(float(fn(col)) if np.isfinite(col).any() else float("nan"))
        out.append([label, ""] + vals)
    return out


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if not np.isfinite(v) else f"{v:.3f}"
    return str(v)


def render_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EVAL_HEADER)
    for r in rows + _footer(rows):
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def render_latex(rows) -> str:
    lines = [r"\begin{tabular}{llrrr}", r"\hline",
             r"object & setting & Chamfer-$\ell_1$ & Hausdorff & time (s) \\", r"\hline"]
    body = rows + _footer(rows)
    for i, r in enumerate(body):
        if i == len(rows):
            lines.append(r"\hline")
        cells = [str(r[0]).replace("_", r"\_"), str(r[1])] + [_fmt(v) for v in r[2:]]
        lines.append(" & ".join(cells) + r" \\")
    lines += [r"\hline", r"\end{tabular}", ""]
    return "\n".join(lines)


def cmd_evaluate(args, log: _Log) -> int:
    rows = evaluation_rows(args.gt, args.recon, args.object, args.setting)
    text = render_csv(rows)
    if args.out is not None:
        Path(args.out).write_text(text)
    elif not args.json:
        sys.stdout.write(text)
    if args.latex is not None:
        Path(args.latex).write_text(render_latex(rows))
    for r in rows:
        log("evaluate", object=r[0], setting=r[1], chamfer_l1_x100=r[2], hausdorff_x100=r[3],
            runtime_s=r[4])
    return 0


# *** argument parsing ***

def _u64(s: str) -> int:
    v = int(s)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(s: str) -> int:
    v = int(s)
    if v <= 0:
        raise argparse.ArgumentTypeError("must be positive")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with command settings")
    common.add_argument("--seed", type=_u64, default=0)
    common.add_argument("--threads", type=_positive, default=None,
                        help="BLAS/OpenMP threads (default: all cores)")
    common.add_argument("--json", action="store_true", help="one JSON object per event on stdout")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="meshlets", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-pc", parents=[common], help="corrupted point cloud from a mesh")
    s.add_argument("input", help="mesh path or builtin:<name>")
    s.add_argument("--setting", choices=sorted(datasets.SETTINGS), default="S1")
    s.add_argument("--normalize", action="store_true", help="fit into [-1, 1]^3 first")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_make_pc)

    s = sub.add_parser("build-corpus", parents=[common], help="meshlet training corpus (.mlc)")
    s.add_argument("sources", nargs="*", help="mesh paths or builtin:<name>")
    s.add_argument("--synthetic", type=int, default=None, help="add N analytic patches")
    s.add_argument("--per-scale", type=int, default=None)
    s.add_argument("--spacing", type=float, default=None)
    s.add_argument("--grid-size", type=int, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_corpus)

    s = sub.add_parser("train", parents=[common], help="train the meshlet autoencoder")
    s.add_argument("corpus")
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--batch-size", type=int, default=None)
    s.add_argument("--lr", type=float, default=None)
    s.add_argument("--beta", type=float, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("fit-patch", parents=[common], help="fit one meshlet to a point patch")
    s.add_argument("model")
    s.add_argument("points")
    s.add_argument("--spacing", type=float, default=None)
    s.add_argument("--steps", type=int, default=None)
    s.add_argument("--gt", default=None, help="ground-truth points for error reporting")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit_patch)

    s = sub.add_parser("reconstruct", parents=[common], help="watertight mesh from a point cloud")
    s.add_argument("points")
    s.add_argument("--model", required=True)
    s.add_argument("--max-outer", type=_positive, default=None)
    s.add_argument("--inner-iterations", type=_positive, default=None)
    s.add_argument("--checkpoint-dir", default=None)
    s.add_argument("--gt", default=None, help="ground-truth points for the metrics log")
    s.add_argument("--setting", default=None, help="label stored for evaluate")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("evaluate", parents=[common], help="Chamfer-l1 / Hausdorff table")
    s.add_argument("gt", help="ground-truth mesh, builtin:<name>, or directory")
    s.add_argument("recon", help="reconstructed mesh or directory of meshes")
    s.add_argument("--object", default=None)
    s.add_argument("--setting", default=None)
    s.add_argument("--out", default=None, help="CSV path (default: stdout)")
    s.add_argument("--latex", default=None, help="also write a LaTeX tabular here")
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or not args.json else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    log = _Log(args.json)
    threads = args.threads or os.cpu_count() or 1
    try:
        with threadpool_limits(limits=threads):
            return args.func(args, log)
    except _Usage as exc:
        parser.print_usage(sys.stderr)
        print(f"meshlets: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"meshlets: config error ({exc.key}): {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteError, FloatingPointError, CoverageImpossible, RemeshFailure) as exc:
        print(f"meshlets: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ParseError, CheckpointError, EmptyInputError, NoTargetsError,
            MeshletError, ValueError) as exc:
        print(f"meshlets: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
