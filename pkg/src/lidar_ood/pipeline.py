"""Experiment recipes: generation, features, scorer fitting, scoring, evaluation.

A run directory holds one content-addressed directory per stage output::

    datasets/<key>/    augmented test split (manifest, clouds, labels, inject stats)
    features/<key>/    train.bin / test.bin feature dumps for one layer
    models/<key>/      model.bin for one (method, layer)
    scores/<key>/      detections.csv (output-space scores) or scores.csv
    reports/           repeat_<r>.csv, summary.csv, summary.txt

``<key>`` hashes the stage name, its configuration and the keys of its
inputs, so rerunning an unchanged spec finds every stage complete and
recomputes nothing. A stage becomes visible only after it finished writing.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import io
import json
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import flow as flowlib
from . import scorers
from .core import Fov, bev_iou
from .detector import DetectorConfig, StubDetector, run_detector
from .errors import DataError, LidarOodError, ParseError
from .featx import LAYERS, LOGIT_LAYER, extract_logit_samples, extract_test_samples, extract_training_samples
from .inject import OVERLAP_EPS, InjectConfig, generate_ood_dataset
from .metrics import METRIC_NAMES, MetricReport, ScoredSet, balanced_eval
from .pcio import Dataset, load_dataset, load_ood_objects, read_feature_dump, save_dataset, write_feature_dump
from .seeding import derive_seed

OUTPUT_METHODS = ("max_softmax", "predictive_entropy", "aleatoric_entropy", "mutual_information")
OUTPUT_LAYER = "output"
POOLED = "all"
DONE = ".complete"


# ---------------------------------------------------------------------------
# experiment spec

@dataclass(frozen=True)
class MahalanobisConfig:
    reg: float = 1e-3
    batch: int = 64
    epochs: int = 5


@dataclass(frozen=True)
class ExperimentSpec:
    dataset: Path
    ood_db: Path
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    inject: InjectConfig = field(default_factory=InjectConfig)
    methods: tuple = ("max_softmax", "mahalanobis", "ocsvm", "flow")
    layers: tuple = ("backbone",)
    mahalanobis: MahalanobisConfig = field(default_factory=MahalanobisConfig)
    ocsvm: scorers.OcSvmConfig = field(default_factory=scorers.OcSvmConfig)
    flow: flowlib.TrainConfig = field(default_factory=flowlib.TrainConfig)
    repeats: int = 3
    seed: int = 0
    train_fraction: float = 0.5
    match_iou: float = 0.5
    balanced_repeats: int = 10
    jobs: int = 1
    detector_b: Optional[DetectorConfig] = None  # keep only detections both configs agree on
    intersect_iou: float = 0.5

    def validate(self) -> "ExperimentSpec":
        if self.repeats < 1:
            raise DataError("repeats must be >= 1")
        if not 0.0 < self.train_fraction < 1.0:
            raise DataError("train_fraction must lie in (0, 1)")
        for p in (self.dataset, self.ood_db):
            if not Path(p).exists():
                raise DataError(f"path does not exist: {p}")
        unknown = [m for m in self.methods if m not in scorers.METHODS]
        if unknown or not self.methods:
            raise DataError(f"unknown methods {unknown}; choose from {scorers.METHODS}")
        bad = [l for l in self.layers if l not in LAYERS + (LOGIT_LAYER,)]
        if bad:
            raise DataError(f"unknown layers {bad}")
        return self

    def grid(self) -> List[Tuple[str, str]]:
        """(method, layer) cells in a fixed order: output-space methods first."""
        cells = [(m, OUTPUT_LAYER) for m in self.methods if m in OUTPUT_METHODS]
        cells += [(m, l) for m in self.methods if m in scorers.FEATURE_METHODS for l in self.layers]
        return cells

    @property
    def feature_layers(self) -> tuple:
        return self.layers if any(m in scorers.FEATURE_METHODS for m in self.methods) else ()


def _fov(text: str) -> Fov:
    return Fov.from_sequence([float(v) for v in text.split(",")])


def _section(cp, name, cls, base=None, converters=None):
    """Dataclass ``cls`` with fields overridden by the INI section ``name``."""
    obj = base if base is not None else cls()
    if not cp.has_section(name):
        return obj
    conv = converters or {}
    kw = {}
    names = {f.name: f for f in fields(cls)}
    for key, raw in cp.items(name):
        if key not in names:
            raise ParseError(f"unknown key {key!r} in section [{name}]")
        if key in conv:
            kw[key] = conv[key](raw)
            continue
        cur = getattr(obj, key)
        if isinstance(cur, bool):
            kw[key] = cp.getboolean(name, key)
        elif isinstance(cur, int):
            kw[key] = int(raw)
        elif isinstance(cur, float):
            kw[key] = float(raw)
        else:
            kw[key] = raw
    try:
        return replace(obj, **kw)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"section [{name}]: {exc}") from None


def _list(raw: str) -> tuple:
    return tuple(v.strip() for v in raw.split(",") if v.strip())


def load_spec(path, overrides: Optional[dict] = None) -> ExperimentSpec:
    """Read an INI experiment spec; relative paths resolve against the file's directory."""
    path = Path(path)
    cp = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except configparser.Error as exc:
        raise ParseError(str(exc), None, path) from None
    return spec_from_config(cp, path.parent, overrides)


def spec_from_config(cp: configparser.ConfigParser, base_dir=".", overrides: Optional[dict] = None):
    base_dir = Path(base_dir)
    if not cp.has_section("experiment"):
        raise ParseError("missing [experiment] section")
    ex = dict(cp.items("experiment"))
    ex.update({k: str(v) for k, v in (overrides or {}).items() if v is not None})
    for key in ("dataset", "ood_db"):
        if key not in ex:
            raise ParseError(f"[experiment] needs {key!r}")
    det = _section(cp, "detector", DetectorConfig, converters={"fov": _fov})
    det_b = _section(cp, "detector_b", DetectorConfig, converters={"fov": _fov}) \
        if cp.has_section("detector_b") else None
    inj = _section(cp, "inject", InjectConfig, converters={"fov": _fov})
    known = {"dataset", "ood_db", "methods", "layers", "repeats", "seed", "train_fraction",
             "match_iou", "balanced_repeats", "jobs", "intersect_iou"}
    extra = set(ex) - known
    if extra:
        raise ParseError(f"unknown keys in [experiment]: {sorted(extra)}")
    try:
        spec = ExperimentSpec(
            dataset=(base_dir / ex["dataset"]),
            ood_db=(base_dir / ex["ood_db"]),
            detector=det,
            inject=inj,
            methods=_list(ex.get("methods", "max_softmax,mahalanobis,ocsvm,flow")),
            layers=_list(ex.get("layers", "backbone")),
            mahalanobis=_section(cp, "mahalanobis", MahalanobisConfig),
            ocsvm=_section(cp, "ocsvm", scorers.OcSvmConfig),
            flow=_section(cp, "flow", flowlib.TrainConfig),
            repeats=int(ex.get("repeats", 3)),
            seed=int(ex.get("seed", 0)),
            train_fraction=float(ex.get("train_fraction", 0.5)),
            match_iou=float(ex.get("match_iou", 0.5)),
            balanced_repeats=int(ex.get("balanced_repeats", 10)),
            jobs=int(ex.get("jobs", 1)),
            detector_b=det_b,
            intersect_iou=float(ex.get("intersect_iou", 0.5)),
        )
    except ValueError as exc:
        raise ParseError(f"[experiment]: {exc}") from None
    return spec


# ---------------------------------------------------------------------------
# content addressing

def _plain(obj):
    if is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, float):
        return repr(obj)
    return obj


def stage_key(stage: str, **payload) -> str:
    text = json.dumps({"stage": stage, **_plain(payload)}, sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _tree_digest(paths: Sequence[Path]) -> str:
    """Content hash of files (directories walked in sorted order)."""
    h = hashlib.sha256()
    for p in paths:
        p = Path(p)
        files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
        for q in files:
            h.update(str(q.relative_to(p) if p.is_dir() else q.name).encode())
            h.update(q.read_bytes())
    return h.hexdigest()[:16]


class StageStore:
    """Immutable, content-addressed stage outputs under a run directory."""

    def __init__(self, root):
        self.root = Path(root)
        self.computed: List[str] = []
        self.reused: List[str] = []

    def get(self, kind: str, key: str, build) -> Path:
        final = self.root / kind / key
        if (final / DONE).exists():
            self.reused.append(f"{kind}/{key}")
            return final
        tmp = self.root / kind / (key + ".partial")
        if tmp.exists():
            shutil.rmtree(tmp)
        if final.exists():
            shutil.rmtree(final)
        tmp.mkdir(parents=True)
        build(tmp)
        (tmp / DONE).write_text("")
        tmp.rename(final)
        self.computed.append(f"{kind}/{key}")
        return final


# ---------------------------------------------------------------------------
# score tables

SCORE_COLUMNS = ("frame_id", "det_index", "class_label", "is_ood", "source", "score")


def write_scores_csv(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCORE_COLUMNS)
        for r in rows:
            w.writerow([r["frame_id"], r["det_index"], r["class_label"], int(bool(r["is_ood"])),
                        r.get("source", ""), repr(float(r["score"]))])


def read_scores_csv(path) -> Tuple[ScoredSet, np.ndarray]:
    """``(ScoredSet, sources)``. ``source`` and ``frame_id``/``det_index`` are optional columns."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"score", "is_ood"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise ParseError(f"score table needs columns {sorted(need)}", 1, path)
        rows = list(reader)
    try:
        scores = [float(r["score"]) for r in rows]
        flags = [r["is_ood"].strip().lower() in ("1", "true") for r in rows]
    except ValueError as exc:
        raise ParseError(str(exc), None, path) from None
    labels = [r.get("class_label", "") or "" for r in rows]
    frames = [r.get("frame_id", "") or "" for r in rows]
    sources = np.array([r.get("source", "") or "" for r in rows], dtype=object)
    try:
        return ScoredSet(scores, flags, labels, frames), sources
    except ValueError as exc:
        raise ParseError(str(exc), None, path) from None


def evaluate_sources(s: ScoredSet, sources, repeats: int, seed: int) -> Dict[str, MetricReport]:
    """Balanced evaluation per named OOD source (ID rows shared) plus the pooled set."""
    sources = np.asarray(sources, dtype=object)
    out = {}
    for src in sorted({str(v) for v in sources[s.is_ood]} - {""}):
        idx = np.nonzero(~s.is_ood | (sources == src))[0]
        out[src] = balanced_eval(s.subset(idx), repeats, derive_seed(seed, "source", src))
    out[POOLED] = balanced_eval(s, repeats, derive_seed(seed, "source", POOLED))
    return out


# ---------------------------------------------------------------------------
# stages

def split_frames(dataset: Dataset, fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    """Random frame split (order preserved within each part)."""
    n = len(dataset.frames)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = min(max(int(round(fraction * n)), 1), n - 1)
    tr, te = np.sort(perm[:n_train]), np.sort(perm[n_train:])
    return (Dataset([dataset.frames[i] for i in tr], dataset.classes),
            Dataset([dataset.frames[i] for i in te], dataset.classes))


def label_detections(frame, detections, match_iou: float, sources: Dict[str, str]) -> List[Optional[tuple]]:
    """Per detection ``(class_name, is_ood, source)`` of the best-overlapping label, or None."""
    out = []
    for det in detections:
        best, best_obj = match_iou, None
        for obj in frame.labels:
            iou = bev_iou(det.box, obj.box)
            if iou >= best and (best_obj is None or iou > best):
                best, best_obj = iou, obj
        if best_obj is None:
            out.append(None)
        elif best_obj.is_ood:
            out.append((best_obj.class_name, True, sources.get(best_obj.class_name, best_obj.class_name)))
        else:
            out.append((best_obj.class_name, False, "id"))
    return out


def _agree(dets_a, dets_b, iou: float) -> List[bool]:
    return [any(bev_iou(a.box, b.box) >= iou for b in dets_b) for a in dets_a]


DET_COLUMNS = ("frame_id", "det_index", "predicted_class", "confidence", "class_label", "is_ood",
               "source") + OUTPUT_METHODS


@dataclass
class _Repeat:
    """Lazily computed per-repeat state shared by the grid cells."""

    spec: ExperimentSpec
    store: StageStore
    r: int
    train: Dataset
    test_dir: Path
    test_key: str
    sources: Dict[str, str]
    _test: Optional[Dataset] = None
    _train_out: Optional[list] = None
    _test_out: Optional[list] = None
    _det_dir: Optional[Path] = None

    @property
    def seed(self) -> int:
        return derive_seed(self.spec.seed, "repeat", self.r)

    def test(self) -> Dataset:
        if self._test is None:
            self._test = load_dataset(self.test_dir / "manifest.txt")
        return self._test

    def train_outputs(self):
        if self._train_out is None:
            model = StubDetector(self.spec.detector)
            self._train_out = [run_detector(model, f.cloud) for f in self.train.frames]
        return self._train_out

    def test_outputs(self):
        """Per test frame: (detector output, kept detection indices, labels)."""
        if self._test_out is None:
            model = StubDetector(self.spec.detector)
            model_b = StubDetector(self.spec.detector_b) if self.spec.detector_b else None
            res = []
            for f in self.test().frames:
                out = run_detector(model, f.cloud)
                labels = label_detections(f, out.detections, self.spec.match_iou, self.sources)
                ok = [l is not None for l in labels]
                if model_b is not None:
                    agree = _agree(out.detections, run_detector(model_b, f.cloud).detections,
                                   self.spec.intersect_iou)
                    ok = [a and b for a, b in zip(ok, agree)]
                res.append((out, [i for i, k in enumerate(ok) if k], labels))
            self._test_out = res
        return self._test_out

    def detections_dir(self) -> Path:
        if self._det_dir is None:
            key = stage_key("detections", test=self.test_key, detector=self.spec.detector,
                            detector_b=self.spec.detector_b, match_iou=self.spec.match_iou,
                            intersect_iou=self.spec.intersect_iou)

            def build(d):
                rows = []
                for f, (out, keep, labels) in zip(self.test().frames, self.test_outputs()):
                    for i in keep:
                        det = out.detections[i]
                        pe, ae, mi = scorers.score_uncertainty(out.mc_softmax_samples[i])
                        cls, ood, src = labels[i]
                        rows.append([f.frame_id, i, det.predicted_class, repr(det.confidence), cls,
                                     int(ood), src, repr(scorers.score_max_softmax(det)),
                                     repr(pe), repr(ae), repr(mi)])
                with open(d / "detections.csv", "w", newline="") as fh:
                    w = csv.writer(fh, lineterminator="\n")
                    w.writerow(DET_COLUMNS)
                    w.writerows(rows)

            self._det_dir = self.store.get("scores", key, build)
        return self._det_dir

    def detection_rows(self) -> List[dict]:
        with open(self.detections_dir() / "detections.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        for r in rows:
            r["is_ood"] = r["is_ood"] == "1"
        return rows

    def features_dir(self, layer: str) -> Path:
        key = stage_key("features", test=self.test_key, train=_dataset_id(self.train),
                        detector=self.spec.detector, detector_b=self.spec.detector_b,
                        match_iou=self.spec.match_iou, layer=layer)

        def build(d):
            classes = self.spec.detector.classes
            train, test = [], []
            for f, out in zip(self.train.frames, self.train_outputs()):
                gt = [o for o in f.labels if not o.is_ood]
                if layer == LOGIT_LAYER:
                    train += extract_logit_samples(out, f.frame_id, gt, classes)
                else:
                    train += extract_training_samples(out, gt, StubDetector(self.spec.detector).anchor_grid,
                                                      layer, f.frame_id)
            for f, (out, keep, labels) in zip(self.test().frames, self.test_outputs()):
                flags = [bool(l and l[1]) for l in labels]
                if layer == LOGIT_LAYER:
                    samples = extract_logit_samples(out, f.frame_id, is_ood=flags)
                else:
                    samples = extract_test_samples(out, layer, f.frame_id, flags)
                test += [samples[i] for i in keep]
            dim = (train or test)[0].vector.size if (train or test) else 0
            write_feature_dump(train, d / "train.bin", layer, len(classes), dim)
            write_feature_dump(test, d / "test.bin", layer, len(classes), dim)

        return self.store.get("features", key, build)


def _dataset_id(ds: Dataset) -> str:
    return hashlib.sha256("\n".join(f.frame_id for f in ds.frames).encode()).hexdigest()[:16]


def _fit(method: str, samples, spec: ExperimentSpec, seed: int):
    if method == "mahalanobis":
        c = spec.mahalanobis
        return scorers.fit_mahalanobis(samples, c.batch, c.epochs, c.reg, skip_insufficient=True)
    if method == "ocsvm":
        return scorers.fit_ocsvm(samples, replace(spec.ocsvm, seed=seed), skip_insufficient=True)
    if method == "flow":
        x = np.vstack([s.vector for s in samples]).astype(np.float64)
        model, _ = flowlib.fit(None, x, replace(spec.flow, seed=seed))
        return model
    raise ValueError(method)


def _cell_scores(rep: _Repeat, method: str, layer: str) -> Path:
    """Scores directory for one grid cell (fitting the model on the way)."""
    spec, store = rep.spec, rep.store
    det_dir = rep.detections_dir()
    rows = rep.detection_rows()
    if layer == OUTPUT_LAYER:
        key = stage_key("output_scores", detections=det_dir.name, method=method)

        def build(d):
            write_scores_csv(d / "scores.csv", [dict(r, score=r[method]) for r in rows])

        return store.get("scores", key, build)

    fdir = rep.features_dir(layer)
    seed = derive_seed(spec.seed, "repeat", rep.r, "fit", method, layer)
    cfg = {"mahalanobis": spec.mahalanobis, "ocsvm": spec.ocsvm, "flow": spec.flow}[method]
    mkey = stage_key("model", features=fdir.name, method=method, config=cfg, seed=seed)

    def build_model(d):
        train, _ = read_feature_dump(fdir / "train.bin")
        scorers.save_model(_fit(method, train, spec, seed), d / "model.bin", layer)

    mdir = store.get("models", mkey, build_model)
    skey = stage_key("scores", model=mdir.name, features=fdir.name, detections=det_dir.name)

    def build_scores(d):
        model, _, _ = scorers.load_model(mdir / "model.bin")
        test, _ = read_feature_dump(fdir / "test.bin", source="prediction")
        if len(test) != len(rows):
            raise DataError(f"{len(test)} test features for {len(rows)} detections")
        x = np.vstack([s.vector for s in test]).astype(np.float64) if test else np.zeros((0, 1))
        sc = np.atleast_1d(scorers.score_model(model, x)) if test else []
        write_scores_csv(d / "scores.csv", [dict(r, score=v) for r, v in zip(rows, sc)])

    return store.get("scores", skey, build_scores)


# ---------------------------------------------------------------------------
# experiment

REPORT_COLUMNS = ("method", "layer", "source") + METRIC_NAMES + ("n_id", "n_ood")


@dataclass
class ExperimentReport:
    out_dir: Path
    repeats: Dict[int, List[dict]]
    errors: Dict[int, str]
    summary: List[dict]
    computed: List[str]
    reused: List[str]


def _write_repeat_csv(path, rows: List[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in rows:
            w.writerow([r["method"], r["layer"], r["source"]] + [repr(float(r[m])) for m in METRIC_NAMES]
                       + [r["n_id"], r["n_ood"]])


def read_repeat_csv(path) -> List[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for m in METRIC_NAMES:
            r[m] = float(r[m])
        r["n_id"], r["n_ood"] = int(r["n_id"]), int(r["n_ood"])
    return rows


def summarize(per_repeat: Dict[int, List[dict]]) -> List[dict]:
    """Mean and population sd over repeats per (method, layer, source)."""
    acc: Dict[tuple, List[dict]] = {}
    order: List[tuple] = []
    for r in sorted(per_repeat):
        for row in per_repeat[r]:
            k = (row["method"], row["layer"], row["source"])
            if k not in acc:
                acc[k] = []
                order.append(k)
            acc[k].append(row)
    out = []
    for k in order:
        vals = np.array([[row[m] for m in METRIC_NAMES] for row in acc[k]])
        entry = dict(zip(("method", "layer", "source"), k), repeats=len(acc[k]))
        for m, mu, sd in zip(METRIC_NAMES, vals.mean(axis=0), vals.std(axis=0)):
            entry[m], entry[m + "_sd"] = float(mu), float(sd)
        out.append(entry)
    return out


def _write_summary(reports: Path, summary: List[dict]) -> None:
    sources = sorted({s["source"] for s in summary} - {POOLED}) + [POOLED]
    cells = []
    for s in summary:
        if (s["method"], s["layer"]) not in cells:
            cells.append((s["method"], s["layer"]))
    idx = {(s["method"], s["layer"], s["source"]): s for s in summary}
    header = ["method", "layer"] + [f"{m}_{src}{suf}" for src in sources for m in METRIC_NAMES
                                    for suf in ("_mean", "_sd")]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for method, layer in cells:
        row = [method, layer]
        for src in sources:
            s = idx.get((method, layer, src))
            for m in METRIC_NAMES:
                row += [repr(s[m]), repr(s[m + "_sd"])] if s else ["", ""]
        w.writerow(row)
    (reports / "summary.csv").write_text(buf.getvalue())

    lines = []
    for src in sources:
        lines.append(f"OOD source: {src}")
        head = f"{'method':<20}{'layer':<10}" + "".join(f"{h:>18}" for h in
                                                     ("AUROC", "AUPR-In", "AUPR-Out", "D_e", "FPR@95TPR"))
        lines += [head, "-" * len(head)]
        for method, layer in cells:
            s = idx.get((method, layer, src))
            if s is None:
                continue
            lines.append(f"{method:<20}{layer:<10}" + "".join(
                f"{100 * s[m]:.2f} ± {100 * s[m + '_sd']:.2f}".rjust(18) for m in METRIC_NAMES))
        lines.append("")
    (reports / "summary.txt").write_text("\n".join(lines))


def run_experiment(spec: ExperimentSpec, out_dir) -> ExperimentReport:
    """Run every repeat of ``spec`` under ``out_dir`` and write the reports.

    A failing repeat is recorded in ``reports/repeat_<r>.error`` and skipped
    in the summary; the other repeats still run.
    """
    spec.validate()
    out = Path(out_dir)
    store = StageStore(out)
    reports = out / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    base = load_dataset(spec.dataset)
    objects = load_ood_objects(spec.ood_db)
    sources = {o.class_name: o.record.source for o in objects}
    inputs = _tree_digest([Path(spec.dataset).parent, Path(spec.ood_db)])
    per_repeat: Dict[int, List[dict]] = {}
    errors: Dict[int, str] = {}
    for r in range(spec.repeats):
        err_path = reports / f"repeat_{r}.error"
        try:
            rows = _run_repeat(spec, store, base, objects, sources, inputs, r)
        except (LidarOodError, ValueError, np.linalg.LinAlgError) as exc:
            errors[r] = f"{type(exc).__name__}: {exc}"
            err_path.write_text(errors[r] + "\n")
            (reports / f"repeat_{r}.csv").unlink(missing_ok=True)
            continue
        err_path.unlink(missing_ok=True)
        per_repeat[r] = rows
        _write_repeat_csv(reports / f"repeat_{r}.csv", rows)
    summary = summarize(per_repeat)
    _write_summary(reports, summary)
    return ExperimentReport(out, per_repeat, errors, summary, store.computed, store.reused)


def _run_repeat(spec, store, base, objects, sources, inputs, r) -> List[dict]:
    split_seed = derive_seed(spec.seed, "repeat", r, "split")
    train, test = split_frames(base, spec.train_fraction, split_seed)
    inj = replace(spec.inject, rng_seed=derive_seed(spec.seed, "repeat", r, "inject"))
    test_key = stage_key("dataset", inputs=inputs, split=split_seed, fraction=spec.train_fraction,
                         inject=inj, detector=spec.detector)

    def build(d):
        model = StubDetector(spec.detector)
        aug, stats = generate_ood_dataset(test, objects, model, inj)
        save_dataset(aug, d)
        (d / "inject_stats.csv").write_text(stats.to_csv())

    test_dir = store.get("datasets", test_key, build)
    rep = _Repeat(spec, store, r, train, test_dir, test_key, sources)
    cells = spec.grid()
    eval_seed = derive_seed(spec.seed, "repeat", r, "eval")

    def run_cell(cell):
        method, layer = cell
        s, src = read_scores_csv(_cell_scores(rep, method, layer) / "scores.csv")
        res = evaluate_sources(s, src, spec.balanced_repeats, eval_seed)
        return [dict(method=method, layer=layer, source=k, n_id=v.n_id, n_ood=v.n_ood,
                     **dict(zip(METRIC_NAMES, v.values()))) for k, v in res.items()]

    # shared lazy state is filled before fanning out
    rep.detections_dir()
    for layer in spec.feature_layers:
        rep.features_dir(layer)
    if spec.jobs > 1:
        with ThreadPoolExecutor(spec.jobs) as pool:
            results = list(pool.map(run_cell, cells))
    else:
        results = [run_cell(c) for c in cells]
    return [row for res in results for row in res]


# ---------------------------------------------------------------------------
# audit

@dataclass(frozen=True)
class Violation:
    frame_id: str
    label_index: int
    class_name: str
    reason: str


@dataclass
class AuditReport:
    violations: List[Violation]
    n_checked: int

    def to_text(self) -> str:
        lines = [f"checked={self.n_checked} violations={len(self.violations)}"]
        for v in self.violations:
            lines.append(f"frame_id={v.frame_id} label={v.label_index} class={v.class_name} reason={v.reason}")
        return "\n".join(lines) + "\n"


def audit_dataset(dataset, cfg: InjectConfig = InjectConfig()) -> AuditReport:
    """Re-check the placement invariants of every OOD label.

    An OOD label must have its center inside the FOV and must not overlap any
    ID label or any OOD label inserted before it (earlier in the label list).
    Overlap with the detector's predictions cannot be re-checked from labels.
    ``dataset`` is a Dataset or a manifest path.
    """
    if not isinstance(dataset, Dataset):
        dataset = load_dataset(dataset)
    violations, checked = [], 0
    for f in dataset.frames:
        for i, obj in enumerate(f.labels):
            if not obj.is_ood:
                continue
            checked += 1
            if not cfg.fov.contains(obj.box.center)[0]:
                violations.append(Violation(f.frame_id, i, obj.class_name, "center_outside_fov"))
            for j, other in enumerate(f.labels):
                if j == i or (other.is_ood and j > i):
                    continue
                if bev_iou(obj.box, other.box) > OVERLAP_EPS:
                    violations.append(Violation(f.frame_id, i, obj.class_name, f"overlaps_label_{j}"))
    return AuditReport(violations, checked)
