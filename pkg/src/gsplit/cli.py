"""Command-line entry point: ``gsplit <subcommand> ...``.

Exit codes: 0 success, 1 missing input file or runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

from . import harness
from .gaussians import write_ply
from .gradcheck import run_all
from .mesh import icosahedron, load_mesh, tetrahedron, topology_counts, triangle
from .raster import write_ppm

RUN_ROOT_ENV = "GSPLIT_RUN_ROOT"
BUILTIN_MESHES = {"triangle": triangle, "tetrahedron": tetrahedron, "icosahedron": icosahedron}

# flag name -> config key, for the common overrides
_FLAG_KEYS = {"k": "k", "layers": "layers", "steps": "steps", "seed": "seed", "lr": "learning_rate",
              "image_size": "image_size"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors always exit 2
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def _resolve_mesh(spec: str):
    if spec in BUILTIN_MESHES:
        return BUILTIN_MESHES[spec]()[0]
    return load_mesh(spec)


def _overrides(args) -> dict[str, str]:
    out = {}
    for flag, key in _FLAG_KEYS.items():
        v = getattr(args, flag, None)
        if v is not None:
            out[key] = str(v)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def _run_dir(args, cfg: harness.FitConfig, config_path: Path) -> Path:
    if args.run_dir:
        return Path(args.run_dir)
    root = Path(os.environ.get(RUN_ROOT_ENV, "runs"))
    return root / f"{config_path.stem}-k{cfg.k}-L{cfg.layers}-s{cfg.seed}"


def _write_csv(rows: list[dict], out=None) -> None:
    w = csv.DictWriter(out or sys.stdout, fieldnames=list(rows[0].keys()), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_fit(args) -> int:
    config_path = Path(args.config) if args.config else harness.DEMO_CONFIG
    cfg = harness.load_config(config_path, _overrides(args))
    run = _run_dir(args, cfg, config_path)
    result = harness.fit(cfg, run)
    _write_csv([result.final])
    print(f"run directory: {run}", file=sys.stderr)
    return 0


def cmd_render(args) -> int:
    model = harness.load_model(args.checkpoint)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "renders"
    out.mkdir(parents=True, exist_ok=True)
    if args.image_size is not None:
        model.cfg.image_size = args.image_size
    for i, img in enumerate(harness.render_model(model)):
        path = out / f"view_{i}.ppm"
        write_ppm(path, img)
        print(path)
    return 0


def cmd_eval(args) -> int:
    model = harness.load_model(args.checkpoint)
    scene = harness.scene_for(model.cfg, model.base)
    row = harness.evaluate(model, scene, step=model.cfg.steps).row
    _write_csv([row])
    return 0


def cmd_topo_stats(args) -> int:
    base = _resolve_mesh(args.mesh)
    keys = ("layer", "vertices", "topo_edges", "conn_edges")
    rows = [dict(zip(keys, c)) for c in topology_counts(base, args.k, args.layers)]
    _write_csv(rows)
    return 0


def cmd_gradcheck(args) -> int:
    results = run_all(args.scale, args.seed)
    print(f"{'module':<16} {'check':<28} {'entries':>7} {'max_rel_err':>11} {'tol':>7}  result")
    for r in results:
        print(f"{r.module:<16} {r.name:<28} {sum(r.report.checked):>7} {r.report.worst:>11.2e} "
              f"{r.report.tol_rel:>7.0e}  {'PASS' if r.passed else 'FAIL'}")
    return 0 if all(r.passed for r in results) else 1


def cmd_export_ply(args) -> int:
    model = harness.load_model(args.checkpoint)
    g = harness.active_gaussians(model)
    write_ply(args.out, g)
    print(f"{len(g)} Gaussians -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gsplit", description="Autoregressive Gaussian splitting, desk-scale harness.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    f = sub.add_parser("fit", help="fit a model to its synthetic target")
    f.add_argument("--config", help="key = value config file (default: shipped demo)")
    f.add_argument("--run-dir", help=f"output directory (default: ${RUN_ROOT_ENV}/<config>-k-L-seed, or runs/)")
    f.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key; repeatable")
    for flag, kind in (("k", int), ("layers", int), ("steps", int), ("seed", int), ("lr", float),
                       ("image_size", int)):
        f.add_argument(f"--{flag.replace('_', '-')}", dest=flag, type=kind)
    f.set_defaults(func=cmd_fit)

    r = sub.add_parser("render", help="render a checkpoint from its configured cameras")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--out", help="output directory (default: <checkpoint dir>/renders)")
    r.add_argument("--image-size", dest="image_size", type=int)
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="metrics and per-layer survival for a checkpoint, as CSV")
    e.add_argument("--checkpoint", required=True)
    e.set_defaults(func=cmd_eval)

    t = sub.add_parser("topo-stats", help="layer sizes of the extended mesh graphs, as CSV")
    t.add_argument("--mesh", required=True, help="OBJ path or one of: " + ", ".join(BUILTIN_MESHES))
    t.add_argument("--k", type=int, required=True)
    t.add_argument("--layers", type=int, required=True)
    t.set_defaults(func=cmd_topo_stats)

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks per module")
    g.add_argument("--scale", choices=("small", "full"), default="small")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    x = sub.add_parser("export-ply", help="write the active Gaussians of a checkpoint as PLY")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export_ply)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"gsplit: file not found: {exc.filename or exc}", file=sys.stderr)
        return 1
    except (ValueError, FloatingPointError, IndexError) as exc:
        print(f"gsplit: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
