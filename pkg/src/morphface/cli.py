"""Command-line front end: ``morphface <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 fit did not
converge under ``--strict``. Every command accepts ``--config FILE`` holding a
JSON object keyed by option name (``out_params`` or ``out-params``); options
given on the command line win. Outputs are written via temp-file rename, and
nothing is written when the command fails.
"""

from __future__ import annotations

import argparse
import csv
import io as _stdio
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from morphface import io
from morphface.alignment import apply_rigid_transform, compute_pseudo_transform, image_center
from morphface.errors import EmptyTextureError, FormatError, InvalidArgumentError
from morphface.fitting import (
    FitConfig,
    fit_landmarks,
    landmark_cost,
    meta_joint_fit,
    reprojection_rmse,
    start_points,
)
from morphface.metrics import mesh_stats, metric_report
from morphface.model import landmark_positions, project_model, synthesize_shape
from morphface.synthetic import random_basis, toy_head_basis
from morphface.texture import texture_from_image

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class NotConverged(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# helpers

def _floats(text, name):
    if text is None or text == "":
        return None
    try:
        return np.array([float(v) for v in str(text).split(",")])
    except ValueError:
        raise UsageError(f"--{name}: expected comma-separated numbers, got {text!r}") from None


def _power_of_two(n):
    return n >= 1 and n & (n - 1) == 0


def _write_text(path, text):
    with io.atomic_write(path, "w") as fh:
        fh.write(text)


def _csv_text(header, rows):
    buf = _stdio.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _num(v):
    return repr(float(v))


# ---------------------------------------------------------------------------
# commands

def cmd_make_basis(a):
    if a.kind == "toy":
        basis = toy_head_basis(n_id=a.n_id, n_exp=a.n_exp, seed=a.seed)
    else:
        if a.vertices < 3:
            raise UsageError("--vertices must be >= 3")
        basis = random_basis(a.vertices, a.n_id, a.n_exp, n_landmarks=min(a.landmarks, a.vertices), seed=a.seed)
    io.save_basis(basis, a.out)
    print(f"basis: {basis.vertex_count} vertices, {len(basis.triangles)} triangles, "
          f"{basis.n_id} id + {basis.n_exp} exp components, {basis.landmark_count} landmarks")


def cmd_synth(a):
    ids, exps = _floats(a.id_coeffs, "id-coeffs"), _floats(a.exp_coeffs, "exp-coeffs")
    fmt = a.format or Path(a.out).suffix.lstrip(".").lower()
    if fmt not in ("obj", "ply"):
        raise UsageError("--format must be obj or ply (or use an .obj/.ply output path)")
    basis = io.load_basis(a.basis)
    ids = np.zeros(basis.n_id) if ids is None else ids
    exps = np.zeros(basis.n_exp) if exps is None else exps
    if len(ids) != basis.n_id:
        raise UsageError(f"--id-coeffs has {len(ids)} values, the basis expects K_id = {basis.n_id}")
    if len(exps) != basis.n_exp:
        raise UsageError(f"--exp-coeffs has {len(exps)} values, the basis expects K_exp = {basis.n_exp}")
    mesh = synthesize_shape(basis, ids, exps)
    io.export_mesh(mesh, a.out, fmt)
    print(f"vertices {mesh.vertex_count} triangles {len(mesh.triangles)}")


def cmd_project(a):
    """Projected landmark positions of ``--params`` as a points file."""
    basis = io.load_basis(a.basis)
    params = io.load_params(a.params)
    params.check_compatible(basis)
    pts = landmark_positions(basis, params) if not a.all_vertices else project_model(basis, params)
    io.save_points(pts, a.out)


def cmd_fit(a):
    basis = io.load_basis(a.basis)
    observed = io.load_points(a.landmarks)
    try:
        config = FitConfig(max_iterations=a.max_iterations, rng_seed=a.seed)
    except InvalidArgumentError as exc:
        raise UsageError(str(exc)) from None
    extra = {}
    if a.meta_joint:
        starts = start_points(basis, observed)
        proxy = min(starts, key=lambda s: landmark_cost(basis, observed, s, config))
        result = meta_joint_fit(basis, observed, proxy, config)
        extra["branch_trace"] = result.branch_trace
    else:
        result = fit_landmarks(basis, observed, config)
    if not result.converged:
        msg = f"fit did not converge: {result.diagnostic}"
        if a.strict:
            raise NotConverged(msg)
        print(f"warning: {msg}; writing best-effort parameters", file=sys.stderr)
    io.save_params(
        result.params, a.out_params,
        final_cost=result.final_cost,
        iterations=result.iterations,
        converged=result.converged,
        reprojection_rmse=reprojection_rmse(basis, observed, result.params),
        **extra,
    )
    print(f"final cost {result.final_cost:.6g} after {result.iterations} steps, converged={result.converged}")


def cmd_align(a):
    if (a.image is None) != (a.out is None):
        raise UsageError("--image and --out must be given together")
    unaligned = io.load_landmarks(a.unaligned_landmarks)
    aligned = io.load_landmarks(a.aligned_landmarks)
    image = io.load_image(a.image) if a.image else None
    center = aligned.image_center()
    if center is None and image is not None:
        center = image_center(image.shape[1], image.shape[0])
    transform = compute_pseudo_transform(unaligned, aligned, center)
    if image is not None:
        io.save_image(apply_rigid_transform(image, transform, center), a.out)
    print(json.dumps(transform.as_dict()))


def cmd_texture(a):
    if not (_power_of_two(a.resolution) and a.resolution >= 64):
        raise UsageError(f"--resolution must be a power of two >= 64, got {a.resolution}")
    if a.raster_size < 64:
        raise UsageError(f"--raster-size must be >= 64, got {a.raster_size}")
    basis = io.load_basis(a.basis)
    if basis.uv_coords is None:
        raise FormatError(f"{a.basis}: basis has no UV coordinates; texturing needs a basis saved with a UV layout "
                          "(for example `morphface make-basis --kind toy`)")
    params = io.load_params(a.params)
    image = io.load_image(a.image)
    mesh, atlas, valid = texture_from_image(basis, params, image, a.resolution, a.raster_size)
    io.export_mesh(mesh, a.out_mesh, "obj", atlas=atlas, uv_coords=basis.uv_coords, atlas_path=a.out_atlas)
    print(f"sampled {int(valid.sum())}/{len(valid)} vertices, atlas {a.resolution}x{a.resolution}")


def _metric_row(pair):
    path_a, path_b = pair
    try:
        rep = metric_report(io.load_image(path_a), io.load_image(path_b))
        return (rep.ssim, rep.ms_ssim, rep.fsim), None
    except (OSError, FormatError, InvalidArgumentError) as exc:
        return None, f"{type(exc).__name__}: {exc}"


def _read_pairs(path):
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if rows and [c.strip().lower() for c in rows[0][:2]] == ["image_a", "image_b"]:
        rows = rows[1:]
    base = Path(path).parent
    pairs = []
    for n, r in enumerate(rows, 1):
        if len(r) < 2:
            raise FormatError(f"{path}: row {n} needs two image paths")
        pairs.append(tuple(r[k].strip() for k in range(2)))
    # relative paths resolve against the pair list's directory
    return pairs, [tuple(str(base / p) for p in pair) for pair in pairs]


def cmd_metrics(a):
    if a.workers < 1:
        raise UsageError("--workers must be >= 1")
    pairs, resolved = _read_pairs(a.pairs)
    if a.workers == 1 or len(resolved) < 2:
        results = [_metric_row(p) for p in resolved]
    else:
        with ProcessPoolExecutor(max_workers=min(a.workers, len(resolved))) as pool:
            results = list(pool.map(_metric_row, resolved))
    rows, failures = [], []
    for (name_a, name_b), (scores, err) in zip(pairs, results):
        if err is not None:
            failures.append(f"{name_a},{name_b}: {err}")
            rows.append([name_a, name_b, "nan", "nan", "nan"])
        else:
            rows.append([name_a, name_b] + [_num(v) for v in scores])
    for f in failures:
        print(f"error: {f}", file=sys.stderr)
    if failures and a.strict:
        raise FormatError(f"{len(failures)} of {len(rows)} pairs could not be evaluated")
    _write_text(a.out, _csv_text(["image_a", "image_b", "ssim", "ms_ssim", "fsim"], rows))


def cmd_stats(a):
    if a.samples < 1:
        raise UsageError("--samples must be >= 1")
    rows = []
    for path in a.mesh:
        mesh = io.load_mesh(path)
        st = mesh_stats(mesh, a.samples, a.seed)
        rows.append([path, str(st.triangle_count), _num(st.avg_triangle_area), str(st.sample_seed)])
    _write_text(a.out, _csv_text(["mesh", "triangles", "avg_triangle_area", "seed"], rows))


# ---------------------------------------------------------------------------
# parser

# defaults live here rather than on the parser so config files can sit between them and explicit flags
DEFAULTS = {
    "make-basis": {"kind": "toy", "vertices": 200, "n_id": 4, "n_exp": 2, "landmarks": 20, "seed": 0},
    "synth": {"id_coeffs": None, "exp_coeffs": None, "format": None},
    "project": {"all_vertices": False},
    "fit": {"meta_joint": False, "seed": 0, "strict": False, "max_iterations": FitConfig.max_iterations},
    "align": {"image": None, "out": None},
    "texture": {"resolution": 1024, "raster_size": 512},
    "metrics": {"strict": False, "workers": min(4, os.cpu_count() or 1)},
    "stats": {"samples": 50, "seed": 0},
}
REQUIRED = {
    "make-basis": ["out"],
    "synth": ["basis", "out"],
    "project": ["basis", "params", "out"],
    "fit": ["basis", "landmarks", "out_params"],
    "align": ["unaligned_landmarks", "aligned_landmarks"],
    "texture": ["basis", "params", "image", "out_mesh", "out_atlas"],
    "metrics": ["pairs", "out"],
    "stats": ["mesh", "out"],
}
COMMANDS = {
    "make-basis": cmd_make_basis,
    "synth": cmd_synth,
    "project": cmd_project,
    "fit": cmd_fit,
    "align": cmd_align,
    "texture": cmd_texture,
    "metrics": cmd_metrics,
    "stats": cmd_stats,
}


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    parser = _Parser(prog="morphface", description="Linear 3D morphable face model toolkit.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, argument_default=S)
        p.add_argument("--config", help="JSON file of option values; explicit flags override it")
        return p

    p = command("make-basis", "write a seeded synthetic basis (toy head with UVs, or random cap)")
    p.add_argument("--kind", choices=["toy", "random"])
    p.add_argument("--vertices", type=int, help="vertex count for --kind random")
    p.add_argument("--n-id", type=int)
    p.add_argument("--n-exp", type=int)
    p.add_argument("--landmarks", type=int, help="landmark count for --kind random")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")

    p = command("synth", "synthesize a mesh from shape coefficients")
    p.add_argument("--basis")
    p.add_argument("--id-coeffs", help="comma-separated identity coefficients (default zeros); "
                   "write --id-coeffs=-1,2 when the list starts with a minus sign")
    p.add_argument("--exp-coeffs", help="comma-separated expression coefficients (default zeros)")
    p.add_argument("--out")
    p.add_argument("--format", choices=["obj", "ply"])

    p = command("project", "project basis landmarks under given params to a points file")
    p.add_argument("--basis")
    p.add_argument("--params")
    p.add_argument("--out")
    p.add_argument("--all-vertices", action="store_true")

    p = command("fit", "fit model params to 2D landmarks")
    p.add_argument("--basis")
    p.add_argument("--landmarks", help='JSON {"points": [[x, y], ...]} in basis landmark order')
    p.add_argument("--out-params")
    p.add_argument("--meta-joint", action="store_true", help="VDC/WPDC lookahead with meta-test selection")
    p.add_argument("--seed", type=int, help="meta-train/meta-test split seed")
    p.add_argument("--strict", action="store_true", help="exit 3 when the fit does not converge")
    p.add_argument("--max-iterations", type=int)

    p = command("align", "pseudo rigid transform between unaligned and aligned landmarks")
    p.add_argument("--unaligned-landmarks")
    p.add_argument("--aligned-landmarks")
    p.add_argument("--image", help="image to warp by the transform")
    p.add_argument("--out", help="warped image path")

    p = command("texture", "extract a textured mesh and UV atlas from an image")
    p.add_argument("--basis")
    p.add_argument("--params")
    p.add_argument("--image")
    p.add_argument("--out-mesh", help="OBJ path (an MTL is written next to it)")
    p.add_argument("--out-atlas", help="atlas PNG path")
    p.add_argument("--resolution", type=int, help="atlas side, power of two >= 64")
    p.add_argument("--raster-size", type=int, help="visibility z-buffer side")

    p = command("metrics", "SSIM, MS-SSIM and FSIM for image pairs (LPIPS is not provided)")
    p.add_argument("--pairs", help="CSV of image_a,image_b rows")
    p.add_argument("--out")
    p.add_argument("--strict", action="store_true", help="exit 2 when any pair fails to load")
    p.add_argument("--workers", type=int)

    p = command("stats", "triangle count and average incident-triangle area")
    p.add_argument("--mesh", nargs="+", help="OBJ, PLY or basis files")
    p.add_argument("--samples", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    return parser


def _load_config(path):
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON config ({exc})") from None
    if not isinstance(doc, dict):
        raise FormatError(f"{path}: config must be a JSON object")
    return {k.replace("-", "_"): v for k, v in doc.items()}


def resolve_options(command: str, given: dict) -> argparse.Namespace:
    """Defaults, then config file, then explicit flags."""
    opts = dict(DEFAULTS[command])
    config_path = given.pop("config", None)
    if config_path is not None:
        cfg = _load_config(config_path)
        known = set(DEFAULTS[command]) | set(REQUIRED[command])
        unknown = sorted(set(cfg) - known)
        if unknown:
            raise UsageError(f"unknown option(s) in {config_path}: {', '.join(unknown)}")
        opts.update(cfg)
    opts.update(given)
    missing = [k for k in REQUIRED[command] if opts.get(k) is None]
    if missing:
        raise UsageError(f"{command}: missing required option(s): "
                         + ", ".join("--" + k.replace("_", "-") for k in missing))
    if command == "stats" and isinstance(opts["mesh"], str):
        opts["mesh"] = [opts["mesh"]]
    return argparse.Namespace(**opts)


def main(argv=None) -> int:
    logging.basicConfig(level=logging.ERROR, format="%(levelname)s: %(message)s")
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        if ns.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        given = {k: v for k, v in vars(ns).items() if k != "command"}
        opts = resolve_options(ns.command, given)
        COMMANDS[ns.command](opts)
        return EXIT_OK
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NotConverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, InvalidArgumentError, EmptyTextureError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        where = f" ({exc.filename})" if exc.filename else ""
        print(f"error: {exc.strerror or exc}{where}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
