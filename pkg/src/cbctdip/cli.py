"""Command-line experiment harness.

Subcommands: phantom, project, subsample, fdk, sirt, dip, eval, ablate,
table, slices. Every command accepts --seed, --config and --out; all
randomness flows from the declared seed, and identical invocations
produce byte-identical CSV outputs.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from . import __version__, backend
from .classical import FDK_FILTERS, fdk_reconstruct, sirt_reconstruct
from .config import Config, ConfigError, load_config
from .generator import (GeneratorState, UNet3DConfig, UNETRConfig,
                        init_generator, init_unet3d)
from .geometry import (GeometryError, ProjectionSet, Volume, VolumeGrid,
                       make_circular_geometry, normalize_volume,
                       subsample_views)
from .io import (FormatError, load_projections, load_volume, save_params,
                 save_projections, save_volume)
from .metrics import psnr, ssim, wilcoxon_one_sided
from .optimizer import MODES, count_dips, dip_reconstruct
from .phantoms import PHANTOM_KINDS, make_phantom
from .projector import forward_project
from .viz import export_slices

log = logging.getLogger("cbctdip")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(1)


def _fmt(x: float) -> str:
    return repr(float(x))


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="master random seed")
    p.add_argument("--config", default=None, help="INI config file")


def _grid_from(cfg: Config, args) -> VolumeGrid:
    g = cfg.grid()
    nx = args.nx if args.nx is not None else g.nx
    ny = args.ny if args.ny is not None else g.ny
    nz = args.nz if args.nz is not None else g.nz
    vs = args.voxel_size if args.voxel_size is not None else g.voxel_size
    return VolumeGrid(nx, ny, nz, vs)


def _add_grid_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--nx", type=int, default=None)
    p.add_argument("--ny", type=int, default=None)
    p.add_argument("--nz", type=int, default=None)
    p.add_argument("--voxel-size", type=float, default=None)


def _init_state(cfg: Config, grid: VolumeGrid, seed: int) -> GeneratorState:
    gcfg = cfg.generator_config()
    if isinstance(gcfg, UNETRConfig):
        return init_generator(gcfg, grid, seed)
    return init_unet3d(gcfg, grid, seed)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_phantom(args) -> int:
    cfg = load_config(args.config)
    if args.size is not None:
        args.nx = args.ny = args.nz = args.size
    grid = _grid_from(cfg, args)
    vol = make_phantom(args.kind, grid, seed=args.seed)
    save_volume(vol, args.out)
    print(f"wrote {args.out} ({args.kind}, {grid.shape}, voxel {grid.voxel_size} mm)")
    return 0


def cmd_project(args) -> int:
    cfg = load_config(args.config)
    vol = load_volume(args.volume)
    g = cfg["geometry"]
    geom = make_circular_geometry(
        args.sod if args.sod is not None else g["sod"],
        args.sdd if args.sdd is not None else g["sdd"],
        args.det_rows if args.det_rows is not None else g["det_rows"],
        args.det_cols if args.det_cols is not None else g["det_cols"],
        args.det_pitch if args.det_pitch is not None else g["det_pitch"],
        args.views if args.views is not None else g["n_views"],
        args.arc if args.arc is not None else g["arc"],
    )
    proj = forward_project(vol, geom)
    if args.noise_sigma > 0:
        rng = np.random.default_rng(np.random.SeedSequence([args.seed, 17]))
        noisy = proj.data + rng.normal(0.0, args.noise_sigma,
                                       proj.data.shape).astype(np.float32)
        proj = ProjectionSet(geom, noisy)
    save_projections(proj, args.out)
    print(f"wrote {args.out} ({geom.n_views} views, {geom.det_rows}x{geom.det_cols})")
    return 0


def cmd_subsample(args) -> int:
    proj = load_projections(args.projections)
    sub = subsample_views(proj, args.views)
    save_projections(sub, args.out)
    print(f"wrote {args.out} ({sub.geometry.n_views} of {proj.geometry.n_views} views)")
    return 0


def cmd_fdk(args) -> int:
    cfg = load_config(args.config)
    proj = load_projections(args.projections)
    grid = _grid_from(cfg, args)
    vol = fdk_reconstruct(proj, grid, filter_kind=args.filter)
    constant = None
    if args.normalize:
        vol, constant = normalize_volume(vol)
    save_volume(vol, args.out)
    msg = f"wrote {args.out} (FDK {args.filter}, {grid.shape})"
    if constant is not None:
        meta = {"normalization_constant": constant}
        with open(args.out + ".meta.json", "w") as f:
            json.dump(meta, f, sort_keys=True)
        msg += f", normalized by {constant:.6g}"
    print(msg)
    return 0


def cmd_sirt(args) -> int:
    cfg = load_config(args.config)
    proj = load_projections(args.projections)
    grid = _grid_from(cfg, args)
    vol = sirt_reconstruct(proj, grid, n_iters=args.iters)
    save_volume(vol, args.out)
    print(f"wrote {args.out} (SIRT, {args.iters} iterations)")
    return 0


def _load_ref_and_gt(args):
    ref_raw = load_volume(args.reference)
    ref, constant = normalize_volume(ref_raw)
    gt = load_volume(args.gt) if args.gt else None
    return ref, constant, gt


def cmd_dip(args) -> int:
    cfg = load_config(args.config)
    ref, constant, gt = _load_ref_and_gt(args)
    state = _init_state(cfg, ref.grid, args.seed)
    opt = cfg.optimizer_config(seed=args.seed, mode=args.mode, n_iters=args.iters)
    vol, runlog = dip_reconstruct(ref, state, cfg.loss_config(), opt, gt=gt)
    os.makedirs(args.out, exist_ok=True)
    save_volume(vol, os.path.join(args.out, "recon.vol"))
    runlog.to_csv(os.path.join(args.out, "runlog.csv"))
    save_params(state.params, os.path.join(args.out, "generator.par"))
    meta = {
        "normalization_constant": constant,
        "seed": args.seed,
        "mode": opt.mode,
        "backend": opt.backend,
        "n_iters": opt.n_iters,
        "alpha": cfg.loss_config().alpha,
        "kernel_backend": backend.active_backend(),
    }
    with open(os.path.join(args.out, "run_meta.json"), "w") as f:
        json.dump(meta, f, sort_keys=True, indent=1)
    final = runlog.rows[-1] if runlog.rows else None
    if final is not None:
        print(f"wrote {args.out}/recon.vol (psnr_ref {final.psnr_ref:.2f} dB)")
    else:
        print(f"wrote {args.out}/recon.vol")
    return 0


def cmd_eval(args) -> int:
    recon = load_volume(args.recon)
    gt = load_volume(args.gt)
    a, b = recon.data, gt.data
    if args.clip01:
        a = np.clip(a, 0.0, 1.0)
        b = np.clip(b, 0.0, 1.0)
    row = [args.recon, args.gt, _fmt(psnr(a, b, 1.0)), _fmt(ssim(a, b, 1.0))]
    new_file = not (args.append and os.path.exists(args.out))
    with open(args.out, "a" if args.append else "w", newline="") as f:
        writer = csv.writer(f)
        if new_file:
            writer.writerow(["recon", "gt", "psnr", "ssim"])
        writer.writerow(row)
    print(f"psnr {row[2]} ssim {row[3]} -> {args.out}")
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    ref, constant, gt = _load_ref_and_gt(args)
    base = _init_state(cfg, ref.grid, args.seed)  # one shared init + noise
    os.makedirs(args.out, exist_ok=True)
    summary_rows = []
    for mode in MODES:
        state = base.clone()
        opt = cfg.optimizer_config(seed=args.seed, mode=mode, n_iters=args.iters)
        vol, runlog = dip_reconstruct(ref, state, cfg.loss_config(), opt, gt=gt)
        runlog.to_csv(os.path.join(args.out, f"runlog_{mode}.csv"))
        save_volume(vol, os.path.join(args.out, f"recon_{mode}.vol"))
        dips = count_dips(runlog.psnr_ref_series())
        final = runlog.rows[-1]
        summary_rows.append([
            mode, dips, _fmt(final.psnr_ref), _fmt(final.ssim_ref),
            "" if final.psnr_gt is None else _fmt(final.psnr_gt),
            "" if final.ssim_gt is None else _fmt(final.ssim_gt),
        ])
        print(f"{mode}: {dips} dips, final psnr_ref {final.psnr_ref:.2f} dB")
    with open(os.path.join(args.out, "ablate_summary.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["mode", "dip_count", "psnr_ref", "ssim_ref",
                         "psnr_gt", "ssim_gt"])
        writer.writerows(summary_rows)
    meta = {"normalization_constant": constant, "seed": args.seed,
            "n_iters": args.iters, "kernel_backend": backend.active_backend()}
    with open(os.path.join(args.out, "ablate_meta.json"), "w") as f:
        json.dump(meta, f, sort_keys=True, indent=1)
    return 0


def _read_eval_csv(path: str) -> tuple[np.ndarray, np.ndarray]:
    psnrs, ssims = [], []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or "psnr" not in reader.fieldnames \
                or "ssim" not in reader.fieldnames:
            raise FormatError(f"{path} is not an eval CSV (needs psnr/ssim columns)")
        for row in reader:
            psnrs.append(float(row["psnr"]))
            ssims.append(float(row["ssim"]))
    if not psnrs:
        raise FormatError(f"{path} has no rows")
    return np.array(psnrs), np.array(ssims)


def cmd_table(args) -> int:
    names = args.names if args.names else [os.path.splitext(os.path.basename(p))[0]
                                           for p in args.inputs]
    if len(names) != len(args.inputs):
        raise ValueError(f"{len(args.inputs)} inputs but {len(names)} names")
    data = {name: _read_eval_csv(path) for name, path in zip(names, args.inputs)}
    os.makedirs(args.out, exist_ok=True)

    with open(os.path.join(args.out, "table_summary.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["method", "n", "psnr_mean", "psnr_std", "ssim_mean", "ssim_std"])
        for name in names:
            ps, ss = data[name]
            writer.writerow([name, len(ps), _fmt(ps.mean()), _fmt(ps.std(ddof=1) if len(ps) > 1 else 0.0),
                             _fmt(ss.mean()), _fmt(ss.std(ddof=1) if len(ss) > 1 else 0.0)])
            print(f"{name}: psnr {ps.mean():.2f} +- {ps.std(ddof=1) if len(ps) > 1 else 0.0:.2f}, "
                  f"ssim {ss.mean():.4f} +- {ss.std(ddof=1) if len(ss) > 1 else 0.0:.4f}")

    with open(os.path.join(args.out, "table_pairwise.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["method_a", "method_b", "p_psnr", "p_ssim"])
        for i, a in enumerate(names):
            for b in names[i + 1:]:
                cells = []
                for metric in (0, 1):
                    try:
                        cells.append(_fmt(wilcoxon_one_sided(data[a][metric],
                                                             data[b][metric])))
                    except ValueError as e:
                        cells.append(f"error: {e}")
                writer.writerow([a, b, cells[0], cells[1]])
    return 0


def cmd_slices(args) -> int:
    vol = load_volume(args.volume)
    err = load_volume(args.error_against) if args.error_against else None
    indices = [int(s) for s in args.indices.split(",") if s]
    paths = export_slices(vol, args.axis, indices, args.out, error_against=err)
    print(f"wrote {len(paths)} image(s) to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="cbctdip",
                     description="Sparse-view CBCT reconstruction toolkit")
    parser.add_argument("--version", action="version", version=f"cbctdip {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="write a synthetic ground-truth volume")
    _add_common(p)
    p.add_argument("--kind", choices=PHANTOM_KINDS, required=True)
    p.add_argument("--size", type=int, default=None, help="cubic grid size")
    _add_grid_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("project", help="simulate cone-beam projections")
    _add_common(p)
    p.add_argument("--volume", required=True)
    p.add_argument("--sod", type=float, default=None)
    p.add_argument("--sdd", type=float, default=None)
    p.add_argument("--det-rows", type=int, default=None)
    p.add_argument("--det-cols", type=int, default=None)
    p.add_argument("--det-pitch", type=float, default=None)
    p.add_argument("--views", type=int, default=None)
    p.add_argument("--arc", type=float, default=None)
    p.add_argument("--noise-sigma", type=float, default=0.0,
                   help="additive Gaussian noise std on line integrals")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("subsample", help="thin views to a sparse set")
    _add_common(p)
    p.add_argument("--projections", required=True)
    p.add_argument("--views", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_subsample)

    p = sub.add_parser("fdk", help="FDK filtered backprojection")
    _add_common(p)
    p.add_argument("--projections", required=True)
    _add_grid_flags(p)
    p.add_argument("--filter", choices=FDK_FILTERS, default="ram_lak")
    p.add_argument("--normalize", action="store_true",
                   help="clip negatives and scale by the volume maximum")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fdk)

    p = sub.add_parser("sirt", help="SIRT iterative reconstruction")
    _add_common(p)
    p.add_argument("--projections", required=True)
    _add_grid_flags(p)
    p.add_argument("--iters", type=int, default=200)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sirt)

    p = sub.add_parser("dip", help="untrained-generator reconstruction")
    _add_common(p)
    p.add_argument("--reference", required=True, help="FDK reference volume")
    p.add_argument("--gt", default=None, help="optional ground truth volume")
    p.add_argument("--mode", choices=MODES, default=None,
                   help="override optimizer.mode from the config")
    p.add_argument("--iters", type=int, default=None,
                   help="override optimizer.n_iters from the config")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_dip)

    p = sub.add_parser("eval", help="PSNR/SSIM of a reconstruction vs ground truth")
    _add_common(p)
    p.add_argument("--recon", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--append", action="store_true", help="append to an existing CSV")
    p.add_argument("--no-clip", dest="clip01", action="store_false",
                   help="skip clipping volumes to [0, 1] before metrics")
    p.add_argument("--out", required=True, help="output CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate",
                       help="run w_zero / w_fixed / reweight at shared seeds")
    _add_common(p)
    p.add_argument("--reference", required=True)
    p.add_argument("--gt", default=None)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("table", help="aggregate eval CSVs into a results table")
    _add_common(p)
    p.add_argument("--inputs", nargs="+", required=True, help="eval CSVs, one per method")
    p.add_argument("--names", nargs="*", default=None, help="method names")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_table)

    p = sub.add_parser("slices", help="export grayscale slice PNGs")
    _add_common(p)
    p.add_argument("--volume", required=True)
    p.add_argument("--axis", type=int, choices=(0, 1, 2), default=0)
    p.add_argument("--indices", required=True, help="comma-separated slice indices")
    p.add_argument("--error-against", default=None,
                   help="second volume for a normalised |a-b| error map")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_slices)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (FileNotFoundError, FormatError, ConfigError, GeometryError,
            ValueError, IndexError, FloatingPointError, OSError) as e:
        sys.stderr.write(f"cbctdip {args.command}: error: {e}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
