"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical divergence.
Every command writes ``run.json`` (resolved arguments, input and output
hashes, versions, wall time) into its output directory, or next to the
output file for ``eval``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .atlas import CohortEntry, DivergenceError, FitConfig, atlas_at, fit, register_to_atlas
from .diffeo import SvfConfig, frac_nonpos_jacobian, integrate_svf
from .io import (VolumeFormatError, file_hash, load_cohort, load_model, load_volume, read_volume,
                 save_model, write_manifest, write_volume)
from .metrics import atlas_head_mask, dsc, head_volume_cm3, hv_error, hv_reference, sharpness, ssim
from .objective import LossWeights
from .phantom import PhantomConfig, analytic_volume_curve, generate_cohort, template_labels
from .vbm import VbmConfig, run_vbm
from .volume import warp_mask

log = logging.getLogger("atlas4d")

EVAL_COLUMNS = ("subject_id", "day", "dsc", "pct_nonpos_jacobian", "hv_cm3", "hv_error_pct", "sharpness", "ssim")
STRUCTURE_COLUMNS = ("label", "window_start", "window_end", "percent_significant")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _delta(text):
    if text.lower() in ("inf", "infinity"):
        return math.inf
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid delta {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError("delta must be >= 0 or 'inf'")
    return v


def build_parser():
    p = _Parser(prog="atlas4d", description="Spatiotemporal atlas construction and evaluation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("phantom-gen", help="generate a synthetic cohort")
    g.add_argument("--config", type=Path, help="JSON file with phantom settings (defaults if omitted)")
    g.add_argument("--out", type=Path, required=True)

    b = sub.add_parser("build-atlas", help="fit an atlas to a cohort")
    b.add_argument("--manifest", type=Path, required=True)
    b.add_argument("--delta", type=_delta, default=3.0)
    b.add_argument("--lambda-atlas", type=float, default=1.0)
    b.add_argument("--lambda-constraint", type=float, default=10.0)
    b.add_argument("--lambda-deformation", type=float, default=0.01)
    b.add_argument("--iters", type=int, default=500)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--step-size", type=float, default=1e-2)
    b.add_argument("--squaring-steps", type=int, default=7)
    b.add_argument("--constraint-mode", choices=("exact", "running"), default="exact")
    b.add_argument("--kappa", type=int, default=18)
    b.add_argument("--out", type=Path, required=True)

    r = sub.add_parser("register", help="register one image to a fitted atlas")
    r.add_argument("--model", type=Path, required=True)
    r.add_argument("--volume", type=Path, required=True)
    r.add_argument("--mask", type=Path, required=True)
    r.add_argument("--day", type=int, help="gestational day (default: read from the volume header)")
    r.add_argument("--iters", type=int, help="optimizer steps (default: the model's iteration count)")
    r.add_argument("--out", type=Path, required=True)

    e = sub.add_parser("eval", help="write the metric report of a fitted atlas")
    e.add_argument("--model", type=Path, required=True)
    e.add_argument("--manifest", type=Path, required=True)
    e.add_argument("--reference-curve", type=Path,
                   help="JSON {day: cm3} head-volume curve (default: clinical reference curve)")
    e.add_argument("--out", type=Path, required=True)

    v = sub.add_parser("vbm", help="voxel-based morphometry between two groups")
    v.add_argument("--model", type=Path, required=True)
    v.add_argument("--manifest", type=Path, required=True)
    v.add_argument("--labels", type=Path, help="label volume, or a folder of *_d<day>.nii label volumes")
    v.add_argument("--sigma", type=float, default=2.0)
    v.add_argument("--window", type=int, default=7)
    v.add_argument("--q", type=float, default=0.05)
    v.add_argument("--smooth-first", action="store_true", help="smooth the Jacobian before the log")
    v.add_argument("--out", type=Path, required=True)

    i = sub.add_parser("info", help="describe a fitted model")
    i.add_argument("--model", type=Path, required=True)
    return p


def _hash_inputs(paths):
    return {str(p): file_hash(p) for p in sorted({str(p) for p in paths}) if Path(p).is_file()}


def _hash_outputs(root: Path, exclude=("run.json",)):
    if root.is_file():
        return {root.name: file_hash(root)}
    return {str(p.relative_to(root)): file_hash(p) for p in sorted(root.rglob("*"))
            if p.is_file() and p.name not in exclude}


def _write_run(where: Path, args, inputs, started, outputs_root=None, extra=None):
    where.mkdir(parents=True, exist_ok=True)
    resolved = {k: (str(v) if isinstance(v, Path) else ("inf" if isinstance(v, float) and math.isinf(v) else v))
                for k, v in vars(args).items()}
    record = {
        "command": args.command,
        "arguments": resolved,
        "seed": getattr(args, "seed", None),
        "inputs": _hash_inputs(inputs),
        "outputs": _hash_outputs(outputs_root) if outputs_root is not None else {},
        "versions": {"atlas4d": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "wall_time_s": round(time.perf_counter() - started, 3),
    }
    if extra:
        record.update(extra)
    (where / "run.json").write_text(json.dumps(record, indent=2) + "\n")


def _manifest_inputs(manifest):
    from .io import read_manifest

    paths = [manifest]
    for r in read_manifest(manifest):
        paths += [r[k] for k in ("volume_path", "mask_path", "label_path") if r.get(k)]
    return paths


# ---------------------------------------------------------------- commands

def cmd_phantom_gen(args, started):
    cfg = PhantomConfig()
    if args.config is not None:
        cfg = PhantomConfig.from_dict(json.loads(args.config.read_text()))
    out = args.out
    for sub in ("images", "masks", "labels", "truth"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    entries, truth, manifest = generate_cohort(cfg)
    records = []
    for e, rec in zip(entries, manifest):
        write_volume(out / "images" / f"{e.key}.nii", e.image, 1.0, e.day)
        write_volume(out / "masks" / f"{e.key}.nii", e.head_mask.astype(np.float32), 1.0, e.day)
        write_volume(out / "labels" / f"{e.key}.nii", e.labels.astype(np.float32), 1.0, e.day)
        records.append({**rec, "volume_path": f"images/{e.key}.nii", "mask_path": f"masks/{e.key}.nii",
                        "label_path": f"labels/{e.key}.nii"})
    write_manifest(out / "manifest.json", records)
    for t in range(cfg.day_min, cfg.day_max + 1):
        write_volume(out / "truth" / f"labels_d{t}.nii", template_labels(cfg, t).astype(np.float32), 1.0, t)
    for sid, nu in sorted(truth.velocities.items()):
        write_volume(out / "truth" / f"velocity_{sid}.nii", nu, 1.0)
    curve = analytic_volume_curve(cfg)
    (out / "truth" / "volume_curve.json").write_text(json.dumps({str(t): v for t, v in curve.items()}, indent=2) + "\n")
    (out / "truth" / "labels.json").write_text(json.dumps({str(k): v for k, v in truth.label_names.items()}) + "\n")
    (out / "phantom_config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    inputs = [args.config] if args.config else []
    _write_run(out, args, inputs, started, out, {"config": cfg.to_dict()})
    print(f"wrote {len(entries)} images to {out}")


def cmd_build_atlas(args, started):
    if args.iters < 1:
        raise UsageError("--iters must be >= 1")
    cohort = load_cohort(args.manifest)
    cfg = FitConfig(
        delta=args.delta,
        weights=LossWeights(args.lambda_constraint, args.lambda_deformation, args.lambda_atlas),
        iterations=args.iters,
        step_size=args.step_size,
        svf=SvfConfig(args.squaring_steps),
        constraint_mode=args.constraint_mode,
        kappa=args.kappa,
        seed=args.seed,
    )
    model = fit(cohort, cfg)
    save_model(model, args.out)
    _write_run(args.out, args, _manifest_inputs(args.manifest), started, args.out, {"config": cfg.to_dict()})
    print(f"fitted {len(cohort)} images over days {model.days[0]}-{model.days[-1]}; "
          f"loss {model.loss_trace[0]:.6f} -> {model.final_loss:.6f}")


def cmd_register(args, started):
    model = load_model(args.model)
    vol = load_volume(args.volume)
    day = args.day if args.day is not None else vol.day
    if day is None:
        raise ValueError("gestational day unknown: pass --day or use a volume with a day tag")
    mask = load_volume(args.mask).data >= 0.5
    entry = CohortEntry(args.volume.stem, int(day), vol.data.astype(np.float64), mask, spacing=vol.spacing)
    cfg = model.config
    if args.iters is not None:
        if args.iters < 1:
            raise UsageError("--iters must be >= 1")
        cfg = FitConfig.from_dict({**cfg.to_dict(), "iterations": args.iters})
    reg = register_to_atlas(model, entry, cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    for name, arr in (("velocity", reg.nu), ("displacement", reg.u), ("inverse_displacement", reg.u_inv)):
        write_volume(args.out / f"{name}.nii", arr, vol.spacing, day)
    (args.out / "registration.json").write_text(json.dumps(
        {"day": int(day), "dsc": reg.dsc, "loss": reg.loss.as_dict()}, indent=2) + "\n")
    _write_run(args.out, args, [args.volume, args.mask, args.model / "model.json"], started, args.out)
    print(f"DSC {reg.dsc:.4f}")


def evaluate(model, cohort, reference=None):
    """Rows of the eval report, one per image, sorted by day then subject."""
    day_rows = {}
    for t in sorted({e.day for e in cohort}):
        a = atlas_at(model, t)
        mask = atlas_head_mask(a)
        hv = head_volume_cm3(mask, model.spacing.get(t, 1.0))
        if reference is None:
            err = hv_error(hv, t)
        else:
            ref = reference[t]
            err = 100.0 * abs(hv - ref) / ref
        day_rows[t] = {"hv_cm3": hv, "hv_error_pct": err,
                       "sharpness": sharpness(a, mask) if mask.any() else float("nan"),
                       "ssim": ssim(model.initial[t], a), "mask": mask}
    rows = []
    for e in sorted(cohort, key=lambda e: (e.day, e.subject_id)):
        info = day_rows[e.day]
        if e.key in model.velocities:
            nu = model.velocities[e.key]
            u, u_inv = integrate_svf(nu, model.config.svf), integrate_svf(-nu, model.config.svf)
        else:
            reg = register_to_atlas(model, e)
            u, u_inv = reg.u, reg.u_inv
        mask = info["mask"]
        warped = warp_mask(mask, u_inv)
        rows.append({
            "subject_id": e.subject_id,
            "day": e.day,
            "dsc": dsc(e.head_mask, warped),
            "pct_nonpos_jacobian": frac_nonpos_jacobian(u, mask) if mask.any() else float("nan"),
            **{k: info[k] for k in ("hv_cm3", "hv_error_pct", "sharpness", "ssim")},
        })
    return rows


def write_report(path, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=EVAL_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.6g}" if isinstance(r[k], float) else r[k]) for k in EVAL_COLUMNS})


def cmd_eval(args, started):
    model = load_model(args.model)
    cohort = load_cohort(args.manifest)
    reference = None
    inputs = _manifest_inputs(args.manifest) + [args.model / "model.json"]
    if args.reference_curve is not None:
        reference = {int(k): float(v) for k, v in json.loads(args.reference_curve.read_text()).items()}
        inputs.append(args.reference_curve)
    else:
        for t in {e.day for e in cohort}:
            hv_reference(t)
    rows = evaluate(model, cohort, reference)
    write_report(args.out, rows)
    _write_run(args.out.parent, args, inputs, started, args.out)
    print(f"wrote {len(rows)} rows to {args.out}")


def _load_labels(path):
    if path is None:
        return None
    path = Path(path)
    if path.is_dir():
        out = {}
        for f in sorted(path.glob("*_d*.nii")):
            tag = f.stem.rsplit("_d", 1)[-1]
            if tag.isdigit():
                out[int(tag)] = np.rint(read_volume(f)[0]).astype(np.int16)
        if not out:
            raise ValueError(f"{path} holds no *_d<day>.nii label volumes")
        return out
    return np.rint(read_volume(path)[0]).astype(np.int16)


def cmd_vbm(args, started):
    if args.window < 1 or args.window % 2 == 0:
        raise UsageError("--window must be a positive odd number of days")
    cfg = VbmConfig(sigma=args.sigma, delta=(args.window - 1) // 2, q=args.q, log_first=not args.smooth_first)
    model = load_model(args.model)
    cohort = load_cohort(args.manifest)
    labels = _load_labels(args.labels)
    res = run_vbm(model, cohort, cfg, labels)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    for w, p in res.p_values.items():
        lo, hi = res.windows[w]
        write_volume(out / f"pvalues_d{lo}-{hi}.nii", p.astype(np.float32))
        write_volume(out / f"significant_d{lo}-{hi}.nii", res.significant[w].astype(np.float32))
    with open(out / "structures.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(STRUCTURE_COLUMNS)
        for lab, lo, hi, pct in res.structure_rows():
            wr.writerow([lab, lo, hi, f"{pct:.6g}"])
    summary = {"threshold": res.threshold, "significant_voxels": res.total_significant(),
               "windows": [list(w) for w in res.windows], "skipped_windows": [list(w) for w in res.skipped],
               "clamped_jacobians": res.n_clamped}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    inputs = _manifest_inputs(args.manifest) + [args.model / "model.json"]
    if args.labels is not None and args.labels.is_file():
        inputs.append(args.labels)
    _write_run(out, args, inputs, started, out)
    print(f"p* = {res.threshold:.3g}; {res.total_significant()} significant voxels")


def cmd_info(args, started):
    desc_path = args.model / "model.json"
    if not desc_path.exists():
        raise FileNotFoundError(f"{args.model} has no model.json")
    desc = json.loads(desc_path.read_text())
    trace = desc.get("loss_trace") or []
    print(json.dumps({
        "day_range": desc["day_range"],
        "shape": desc["shape"],
        "images": len(desc["images"]),
        "config": desc["config"],
        "iterations_run": len(trace),
        "initial_loss": trace[0] if trace else None,
        "final_loss": desc.get("final_loss"),
    }, indent=2))


COMMANDS = {
    "phantom-gen": cmd_phantom_gen,
    "build-atlas": cmd_build_atlas,
    "register": cmd_register,
    "eval": cmd_eval,
    "vbm": cmd_vbm,
    "info": cmd_info,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.perf_counter()
    try:
        COMMANDS[args.command](args, started)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"atlas4d: error: {exc}", file=sys.stderr)
        return 1
    except DivergenceError as exc:
        print(f"atlas4d: {exc}", file=sys.stderr)
        return 3
    except (ValueError, KeyError, FileNotFoundError, IsADirectoryError, VolumeFormatError, json.JSONDecodeError) as exc:
        print(f"atlas4d: data error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
