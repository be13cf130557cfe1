"""Command-line interface: ``lidar-ood <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data or validation error. Machine
outputs go to files under ``--out``; a short human summary goes to stdout
unless ``--quiet``. Flags override values from ``--config`` (INI).

Subcommands::

    inject  --config C --out D [--seed S] [--dataset M] [--ood-db DIR]
            [--gamma-max N] [--zeta-max N] [--tau T]
    fit     --method {mahalanobis,ocsvm,flow} --features TRAIN.bin --out D [--seed S]
    score   --model MODEL.bin --features TEST.bin --out D
    eval    --scores S.csv --out D --seed S [--repeats R]
    sweep   --detections DETS.csv --manifest M --out D (--thresholds a,b,... | --n-thresholds N)
    mine    --labels LABELS.txt --out D [--classes Car,Van,...]
    audit   --manifest M --out D [--config C]
    run     --config SPEC.ini --out D [--seed S] [--repeats R] [--jobs J]

Randomized subcommands (inject, fit with ocsvm/flow, eval, run) refuse to
run without a seed from ``--seed`` or the config file.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import flow as flowlib
from . import metrics, mine, pipeline, scorers
from .core import Box3D
from .detector import StubDetector
from .errors import DataError, LidarOodError, ParseError, SingleClassSet
from .inject import InjectConfig, generate_ood_dataset
from .pcio import load_dataset, load_ood_objects, read_feature_dump, read_labels, save_dataset

log = logging.getLogger(__name__)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=None, help="master seed (overrides config)")
    p.add_argument("--config", type=Path, default=None, help="INI configuration file")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--quiet", action="store_true", help="suppress the summary on stdout")
    p.add_argument("--jobs", type=int, default=1, help="maximum parallel workers")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="lidar-ood", description="OOD object detection toolkit for LiDAR point clouds")
    sub = parser.add_subparsers(dest="command", metavar="subcommand", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("inject", parents=[common], help="insert OOD objects into ID frames")
    p.add_argument("--dataset", type=Path, help="ID dataset manifest")
    p.add_argument("--ood-db", type=Path, help="OOD object database directory")
    p.add_argument("--gamma-max", type=int)
    p.add_argument("--zeta-max", type=int)
    p.add_argument("--tau", type=float)

    p = sub.add_parser("fit", parents=[common], help="fit a feature-space OOD scorer")
    p.add_argument("--method", required=True, choices=scorers.FEATURE_METHODS)
    p.add_argument("--features", type=Path, required=True, help="training feature dump")

    p = sub.add_parser("score", parents=[common], help="score a feature dump with a fitted model")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--features", type=Path, required=True)

    p = sub.add_parser("eval", parents=[common], help="class-balanced metrics of a score table")
    p.add_argument("--scores", type=Path, required=True)
    p.add_argument("--repeats", type=int, default=None)

    p = sub.add_parser("sweep", parents=[common], help="OOD-threshold performance sweep")
    p.add_argument("--detections", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True, help="ground-truth dataset manifest")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--thresholds", type=str)
    g.add_argument("--n-thresholds", type=int)
    p.add_argument("--ap-points", type=int, default=40, choices=(11, 40))

    p = sub.add_parser("mine", parents=[common], help="mine unusual vehicles from box sizes")
    p.add_argument("--labels", type=Path, required=True)
    p.add_argument("--classes", type=str, default=None, help="comma-separated classes to keep")

    p = sub.add_parser("audit", parents=[common], help="re-check injection invariants")
    p.add_argument("--manifest", type=Path, required=True)

    p = sub.add_parser("run", parents=[common], help="run a full experiment spec")
    p.add_argument("--repeats", type=int, default=None)
    return parser


# ---------------------------------------------------------------------------
# helpers

def _read_config(path: Optional[Path]) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None)
    if path is not None:
        try:
            with open(path) as fh:
                cp.read_file(fh)
        except configparser.Error as exc:
            raise ParseError(str(exc), None, path) from None
    return cp


def _config_seed(cp, *places) -> Optional[int]:
    for section, key in places:
        if cp.has_option(section, key):
            return int(cp.get(section, key))
    return None


def _require_seed(args, cp, *places) -> int:
    seed = args.seed if args.seed is not None else _config_seed(cp, *places)
    if seed is None:
        raise UsageError(f"{args.command}: a seed is required (--seed or config)")
    return seed


def _config_path(args, cp, key: str, flag) -> Path:
    if flag is not None:
        return flag
    if cp.has_option("experiment", key):
        return Path(args.config).parent / cp.get("experiment", key)
    raise UsageError(f"{args.command}: --{key.replace('_', '-')} or [experiment] {key} is required")


def _say(args, text: str) -> None:
    if not args.quiet:
        print(text)


# ---------------------------------------------------------------------------
# subcommands

def cmd_inject(args, cp) -> None:
    seed = _require_seed(args, cp, ("inject", "rng_seed"), ("experiment", "seed"))
    det = pipeline._section(cp, "detector", pipeline.DetectorConfig, converters={"fov": pipeline._fov})
    cfg = pipeline._section(cp, "inject", InjectConfig, converters={"fov": pipeline._fov})
    over = {k: v for k, v in (("gamma_max", args.gamma_max), ("zeta_max", args.zeta_max),
                              ("tau", args.tau)) if v is not None}
    cfg = replace(cfg, rng_seed=seed, **over)
    dataset = load_dataset(_config_path(args, cp, "dataset", args.dataset))
    objects = load_ood_objects(_config_path(args, cp, "ood_db", args.ood_db))
    aug, stats = generate_ood_dataset(dataset, objects, StubDetector(det), cfg)
    save_dataset(aug, args.out)
    (args.out / "inject_stats.csv").write_text(stats.to_csv())
    with open(args.out / "trials.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "frame_id", "trial", "object_id", "azimuth", "outcome"])
        for t in stats.trials:
            w.writerow([t.class_name, t.frame_id, t.trial, t.object_id, repr(t.azimuth), t.outcome.value])
    lines = [f"{c}: inserted {s.inserted_count} in {s.attempted_frames} frames "
             f"(injection failures/frame {s.injection_failures:.2f}, "
             f"detection failures/frame {s.detection_failures:.2f})" for c, s in stats.per_class.items()]
    _say(args, "\n".join(lines))


def cmd_fit(args, cp) -> None:
    samples, header = read_feature_dump(args.features)
    if args.method == "mahalanobis":
        c = pipeline._section(cp, "mahalanobis", pipeline.MahalanobisConfig)
        model = scorers.fit_mahalanobis(samples, c.batch, c.epochs, c.reg)
    elif args.method == "ocsvm":
        seed = _require_seed(args, cp, ("ocsvm", "seed"), ("experiment", "seed"))
        c = replace(pipeline._section(cp, "ocsvm", scorers.OcSvmConfig), seed=seed)
        model = scorers.fit_ocsvm(samples, c)
    else:
        seed = _require_seed(args, cp, ("flow", "seed"), ("experiment", "seed"))
        c = replace(pipeline._section(cp, "flow", flowlib.TrainConfig), seed=seed)
        x = np.vstack([s.vector for s in samples]).astype(np.float64) if samples else np.zeros((0, 0))
        model, trace = flowlib.fit(None, x, c)
        flowlib.write_trace(trace, args.out / "trace.csv")
    scorers.save_model(model, args.out / "model.bin", header.layer)
    _say(args, f"fitted {args.method} on {len(samples)} samples (layer {header.layer or '-'}, "
               f"dimension {header.dim})")


def cmd_score(args, cp) -> None:
    model, method, layer = scorers.load_model(args.model)
    samples, header = read_feature_dump(args.features, source="prediction")
    if samples:
        x = np.vstack([s.vector for s in samples]).astype(np.float64)
        sc = np.atleast_1d(scorers.score_model(model, x))
    else:
        sc = []
    rows = [dict(frame_id=s.frame_id, det_index=i, class_label=s.class_label, is_ood=s.is_ood,
                 source="", score=v) for i, (s, v) in enumerate(zip(samples, sc))]
    pipeline.write_scores_csv(args.out / "scores.csv", rows)
    _say(args, f"scored {len(rows)} samples with {method} ({layer or '-'})")


def cmd_eval(args, cp) -> None:
    s, sources = pipeline.read_scores_csv(args.scores)
    if s.n_id == 0 or s.n_ood == 0:
        raise SingleClassSet(f"{args.scores}: score table has {s.n_id} ID and {s.n_ood} OOD rows")
    seed = _require_seed(args, cp, ("metrics", "seed"), ("experiment", "seed"))
    repeats = args.repeats
    if repeats is None:
        repeats = cp.getint("metrics", "repeats", fallback=cp.getint("experiment", "balanced_repeats",
                                                                     fallback=10))
    res = pipeline.evaluate_sources(s, sources, repeats, seed)
    (args.out / "metrics.csv").write_text(metrics.report_csv(res, key="source"))
    table = metrics.format_table(res, key="source")
    (args.out / "metrics.txt").write_text(table)
    _say(args, table.rstrip())


def read_detection_table(path) -> List[metrics.ScoredDetection]:
    """Rows ``frame_id,predicted_class,confidence,x,y,z,l,w,h,yaw,ood_score``."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = ("frame_id", "predicted_class", "confidence", "x", "y", "z", "l", "w", "h", "yaw", "ood_score")
        missing = [c for c in need if c not in (reader.fieldnames or ())]
        if missing:
            raise ParseError(f"detection table lacks columns {missing}", 1, path)
        for lineno, r in enumerate(reader, start=2):
            try:
                box = Box3D((float(r["x"]), float(r["y"]), float(r["z"])),
                            (float(r["l"]), float(r["w"]), float(r["h"])), float(r["yaw"]))
                det = metrics.DetectionRecord(box, r["predicted_class"], float(r["confidence"]))
                out.append(metrics.ScoredDetection(r["frame_id"], det, float(r["ood_score"])))
            except ValueError as exc:
                raise ParseError(str(exc), lineno, path) from None
    return out


def cmd_sweep(args, cp) -> None:
    dets = read_detection_table(args.detections)
    ds = load_dataset(args.manifest)
    gt = {f.frame_id: f.labels for f in ds.frames}
    if args.thresholds is not None:
        try:
            thr = [float(v) for v in args.thresholds.split(",") if v.strip()]
        except ValueError:
            raise UsageError("sweep: --thresholds must be comma-separated numbers") from None
    else:
        scores = np.array([d.ood_score for d in dets])
        thr = list(np.quantile(scores, np.linspace(0, 1, args.n_thresholds))) if len(scores) else []
    rows = metrics.ood_threshold_sweep(dets, gt, thr, ds.classes, n_points=args.ap_points)
    (args.out / "sweep.csv").write_text(metrics.sweep_csv(rows))
    _say(args, "\n".join(f"tau={r.threshold:.4g} mAP={r.mAP:.4f} FP={r.n_fp} removed={r.n_removed} "
                         f"ood_recall={r.ood_recall:.3f}" for r in rows))


def cmd_mine(args, cp) -> None:
    labels = read_labels(args.labels)
    if args.classes:
        keep = set(pipeline._list(args.classes))
        labels = [l for l in labels if l.class_name in keep]
    outliers, diag = mine.mine_outliers([l.box for l in labels], return_diagnostics=True)
    (args.out / "outliers.txt").write_text(mine.format_diagnostics(outliers, diag))
    _say(args, f"{len(outliers)} outliers among {len(labels)} vehicles: "
               f"{', '.join(str(int(i)) for i in outliers) or '-'}")


def cmd_audit(args, cp) -> None:
    cfg = pipeline._section(cp, "inject", InjectConfig, converters={"fov": pipeline._fov})
    rep = pipeline.audit_dataset(args.manifest, cfg)
    (args.out / "audit.txt").write_text(rep.to_text())
    _say(args, f"audited {rep.n_checked} OOD objects: {len(rep.violations)} violations")


def cmd_run(args, cp) -> None:
    if args.config is None:
        raise UsageError("run: --config is required")
    seed = _require_seed(args, cp, ("experiment", "seed"))
    over = {"seed": seed, "jobs": args.jobs}
    if args.repeats is not None:
        over["repeats"] = args.repeats
    spec = pipeline.spec_from_config(cp, Path(args.config).parent, over)
    rep = pipeline.run_experiment(spec, args.out)
    msg = [f"{len(rep.repeats)} of {spec.repeats} repeats finished; "
           f"{len(rep.computed)} stages computed, {len(rep.reused)} reused"]
    msg += [f"repeat {r} failed: {e}" for r, e in sorted(rep.errors.items())]
    msg.append((args.out / "reports" / "summary.txt").read_text().rstrip())
    _say(args, "\n".join(msg))


COMMANDS = {"inject": cmd_inject, "fit": cmd_fit, "score": cmd_score, "eval": cmd_eval,
            "sweep": cmd_sweep, "mine": cmd_mine, "audit": cmd_audit, "run": cmd_run}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                            format="%(levelname)s %(name)s: %(message)s")
        cp = _read_config(args.config)
        args.out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, cp)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (LidarOodError, OSError, configparser.Error) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
