"""Command-line entry point exposing the pipeline as subcommands.

Exit codes are stable: 0 success, 1 usage error, 2 input-format error,
3 numeric failure, 4 I/O error.  Progress goes to stderr; machine output
only to the files named by flags.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import InputFormatError, NumericError
from . import clinical as clin
from . import metrics as met
from . import phantom as phan
from . import preprocess as prep
from . import reconstruct as recon
from .data_io import DatasetIndex, LabelMask, Volume, VolumeHeader, read_nifti, \
    normalize_intensity, split_dataset, write_nifti
from .training import TrainConfig, evaluate, lr_schedule, train, write_epoch_log
from .unet import UNet3D, build, load_model, save_model, sliding_window_infer

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FORMAT = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 (not 2) on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _limit_threads(threads: int) -> None:
    if threads == 1:
        try:
            from threadpoolctl import threadpool_limits
            threadpool_limits(1)
        except ImportError:
            pass


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def _cmd_phantom(args) -> int:
    spec = phan.PhantomSpec(noise_sigma=args.noise)
    phan.generate_cohort(args.count, spec, args.out, seed=args.seed,
                         papillary=args.papillary)
    _log(f"wrote {args.count} phantom subjects to {args.out}")
    return EXIT_OK


def _iter_masks(directory: Path):
    for path in sorted(directory.iterdir()):
        if path.name.endswith(".nii") or path.name.endswith(".nii.gz"):
            yield path


def _cmd_clean_masks(args) -> int:
    src = Path(args.in_dir)
    dst = Path(args.out)
    if not src.is_dir():
        raise OSError(f"{src} is not a directory")
    dst.mkdir(parents=True, exist_ok=True)
    count = 0
    for path in _iter_masks(src):
        mask = read_nifti(path)
        if not isinstance(mask, LabelMask):
            _log(f"skipping {path.name}: not a label mask")
            continue
        cleaned = prep.clean_mask(mask, three_d=args.three_d)
        write_nifti(cleaned, dst / path.name)
        count += 1
    _log(f"cleaned {count} masks into {dst}")
    return EXIT_OK


def _cmd_train(args) -> int:
    config = TrainConfig.from_json(Path(args.config).read_text(encoding="utf-8"))
    root = Path(args.data)
    index = DatasetIndex.load(root / "index.json")
    if args.split:
        fractions = tuple(float(x) for x in args.split.split("/"))
        if len(fractions) != 3:
            raise ValueError("--split expects train/val/test fractions like 0.7/0.1/0.2")
        index = split_dataset(index, fractions, config.seed)
    net = build(config.unet_config())
    _log(f"model has {net.parameter_count()} parameters; "
         f"training {config.epochs} epochs on {len(index.for_split('train'))} volumes")
    logs = train(net, index, config, root,
                 checkpoint_base=args.out if config.checkpoint_every > 0 else None)
    save_model(net, args.out)
    log_path = args.log if args.log else f"{args.out}.log.csv"
    write_epoch_log(logs, log_path)
    _log(f"final train dice {logs[-1].train_dice:.4f}; model at {args.out}")
    return EXIT_OK


def _cmd_segment(args) -> int:
    net, _ = load_model(args.model)
    obj = read_nifti(args.image)
    if isinstance(obj, LabelMask):
        obj = Volume(obj.header, obj.labels.astype(np.float32))
    volume = normalize_intensity(obj)
    center = prep.locate_heart_bbox_from_image(volume.values)
    values = prep.crop_or_pad_array(volume.values, center, prep.CANONICAL_SHAPE)
    pred = sliding_window_infer(net, values)
    if not args.keep_papillary:
        pred = prep.clean_mask(pred)
    full = prep.uncrop_array(pred, center, obj.header.dims)
    mask = LabelMask(VolumeHeader(obj.header.dims, obj.header.spacing_mm, "uint8"), full)
    write_nifti(mask, args.out)
    _log(f"segmented {args.image} -> {args.out}")
    return EXIT_OK


def _phase_of(name: str) -> str:
    if "_ES" in name or name.startswith("ES"):
        return "ES"
    if "_ED" in name or name.startswith("ED"):
        return "ED"
    return "NA"


def _cmd_eval(args) -> int:
    pred_dir = Path(args.pred)
    gt_dir = Path(args.gt)
    rows = []
    for gt_path in _iter_masks(gt_dir):
        pred_path = pred_dir / gt_path.name
        if not pred_path.exists():
            _log(f"skipping {gt_path.name}: no prediction")
            continue
        gt = read_nifti(gt_path)
        pred = read_nifti(pred_path)
        if not isinstance(gt, LabelMask) or not isinstance(pred, LabelMask):
            _log(f"skipping {gt_path.name}: not a label mask")
            continue
        subject = gt_path.name.split("_")[0]
        rows.extend(met.volume_metrics(pred, gt, subject, _phase_of(gt_path.name)))
    if not rows:
        raise InputFormatError("no comparable mask pairs found")
    report = met.aggregate_report(rows)
    met.write_metrics_csv(report, args.report)
    for (phase, label), agg in report.by_phase_label.items():
        _log(f"{phase} {met.LABEL_NAMES.get(label, label)}: dice {agg.dice:.4f} "
             f"iou {agg.iou_percent:.2f} (n={agg.n})")
    return EXIT_OK


def _read_mask_checked(path) -> LabelMask:
    obj = read_nifti(path)
    if not isinstance(obj, LabelMask):
        raise InputFormatError(f"{path}: expected a uint8 label mask")
    return obj


def _cmd_clinical(args) -> int:
    seg_ed = _read_mask_checked(args.seg_ed)
    seg_es = _read_mask_checked(args.seg_es)
    spacing = seg_ed.header.spacing_mm
    reports = []
    if args.raw_ed and args.raw_es:
        raw_ed = _read_mask_checked(args.raw_ed)
        raw_es = _read_mask_checked(args.raw_es)
        included, excluded = clin.compare_variants(
            (raw_ed, raw_es), (seg_ed, seg_es), spacing, subject=args.subject)
        reports = [included, excluded]
    else:
        reports = [clin.subject_report(seg_ed, seg_es, spacing,
                                       args.subject, "papillary_excluded")]
    clin.write_clinical_csv(reports, args.report)
    for r in reports:
        _log(f"{r.variant}: EDV {r.edv_ml:.2f} mL, ESV {r.esv_ml:.2f} mL, "
             f"LVEF {r.lvef_percent:.2f} %, mass {r.myo_mass_g:.2f} g")
    return EXIT_OK


def _read_column(path) -> list:
    values = []
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.reader(f):
            if not row:
                continue
            try:
                values.append(float(row[0]))
            except ValueError:
                continue  # header line
    if not values:
        raise InputFormatError(f"{path}: no numeric values in first column")
    return values


def _cmd_bland_altman(args) -> int:
    a = _read_column(args.a)
    b = _read_column(args.b)
    if len(a) != len(b):
        raise InputFormatError(f"column lengths differ: {len(a)} vs {len(b)}")
    stats = clin.bland_altman(list(zip(a, b)))
    clin.write_bland_altman_csv({args.name: stats}, args.out)
    _log(f"{args.name}: bias {stats.bias:.4f}, LoA [{stats.loa_low:.4f}, "
         f"{stats.loa_high:.4f}] (n={stats.n})")
    return EXIT_OK


def _cmd_reconstruct(args) -> int:
    mask = _read_mask_checked(args.seg)
    label = {"lv": prep.CAVITY, "myo": prep.MYOCARDIUM}[args.label]
    mesh = recon.marching_cubes(mask, label, mask.header.spacing_mm)
    out = Path(args.out)
    if out.suffix.lower() == ".stl":
        recon.export_stl(mesh, out, label=args.label)
    elif out.suffix.lower() == ".obj":
        recon.export_obj(mesh, out)
    else:
        raise InputFormatError(f"output must end in .stl or .obj, got {out.name}")
    _log(f"{args.label}: {len(mesh.triangles)} triangles, "
         f"{recon.mesh_volume_ml(mesh):.2f} mL enclosed -> {out}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    from .gradcheck_suite import run_suite
    results = run_suite(tolerance=args.tolerance, cases=args.cases, seed=args.seed)
    worst = 0.0
    ok = True
    for r in results:
        _log(str(r))
        worst = max(worst, r.max_rel_error)
        ok = ok and r.passed
    _log(f"worst relative error {worst:.3e} over {len(results)} checks")
    if not ok:
        raise NumericError("gradient check failed")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser wiring
# --------------------------------------------------------------------------

def _build_parser() -> _Parser:
    parser = _Parser(prog="cardioseg",
                     description="3D U-Net cardiac segmentation pipeline")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("phantom", help="generate a synthetic phantom cohort")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--papillary", action="store_true",
                   help="add papillary blobs inside the cavity")
    p.add_argument("--noise", type=float, default=0.02)
    p.set_defaults(func=_cmd_phantom)

    p = sub.add_parser("clean-masks", help="papillary exclusion over a mask directory")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--three-d", action="store_true",
                   help="use 26-connected 3D components instead of per-slice")
    p.set_defaults(func=_cmd_clean_masks)

    p = sub.add_parser("train", help="train the segmentation model")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True, help="directory containing index.json")
    p.add_argument("--out", required=True, help="model output path")
    p.add_argument("--log", default=None, help="epoch log CSV (default <out>.log.csv)")
    p.add_argument("--split", default=None,
                   help="re-split the index, e.g. 0.7/0.1/0.2")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("segment", help="segment one volume with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--keep-papillary", action="store_true",
                   help="skip the mask-cleaning step on the prediction")
    p.set_defaults(func=_cmd_segment)

    p = sub.add_parser("eval", help="compare predicted masks against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("clinical", help="EDV/ESV/LVEF/mass from ED+ES masks")
    p.add_argument("--seg-ed", required=True)
    p.add_argument("--seg-es", required=True)
    p.add_argument("--raw-ed", default=None)
    p.add_argument("--raw-es", default=None)
    p.add_argument("--report", required=True)
    p.add_argument("--subject", default="subject")
    p.set_defaults(func=_cmd_clinical)

    p = sub.add_parser("bland-altman", help="agreement statistics for two CSV columns")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--name", default="parameter")
    p.set_defaults(func=_cmd_bland_altman)

    p = sub.add_parser("reconstruct", help="marching-cubes surface export")
    p.add_argument("--seg", required=True)
    p.add_argument("--label", choices=["lv", "myo"], required=True)
    p.add_argument("--out", required=True, help="mesh path ending in .stl or .obj")
    p.set_defaults(func=_cmd_reconstruct)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer")
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.add_argument("--cases", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gradcheck)

    for sp in sub.choices.values():
        sp.add_argument("--threads", type=int, default=1,
                        help="kernel thread budget; 1 is the deterministic reference")
    return parser


def run(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    _limit_threads(args.threads)
    try:
        return args.func(args)
    except InputFormatError as e:
        _log(f"input error: {e}")
        return EXIT_FORMAT
    except ValueError as e:
        _log(f"input error: {e}")
        return EXIT_FORMAT
    except NumericError as e:
        _log(f"numeric failure: {e}")
        return EXIT_NUMERIC
    except OSError as e:
        _log(f"I/O error: {e}")
        return EXIT_IO


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
