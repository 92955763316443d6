"""Command-line entry point: ``nphct <command> ...``.

Exit codes: 0 success, 1 bad input or other failure, 2 registration failure,
3 degenerate contour, 4 I/O error, 64 command-line usage error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shutil
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("nphct")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_REGISTRATION = 2
EXIT_CONTOUR = 3
EXIT_IO = 4
EXIT_USAGE = 64  # argparse would use 2, which is taken by registration failure

NII_SUFFIXES = (".nii.gz", ".nii")
NAME_SUFFIXES = ("_truth", "_seg", "_ct", "_labels")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ------------------------------------------------------------------ manifest


def _hash(obj) -> str:
    text = json.dumps(obj, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class RunManifest:
    """What ran, on what, with which settings. Timestamps live only here."""

    command: str
    config_hash: str
    inputs: dict
    outputs: list = field(default_factory=list)
    rng_seeds: dict = field(default_factory=dict)
    wall_time_s: float = 0.0
    tool_version: str = __version__
    started: str = ""
    status: str = "planned"
    error: str | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, default=str)

    def write(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(f".tmp-{path.name}")
        tmp.write_text(self.to_json())
        os.replace(tmp, path)


class _Staging:
    """Collects outputs in a hidden sibling directory, moved into place on success."""

    def __init__(self, out_dir):
        self.out_dir = Path(out_dir)
        self.tmp = self.out_dir.parent / f".{self.out_dir.name}.tmp-{os.getpid()}"

    def __enter__(self) -> Path:
        if self.tmp.exists():
            shutil.rmtree(self.tmp)
        self.tmp.mkdir(parents=True)
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            for item in sorted(self.tmp.iterdir()):
                os.replace(item, self.out_dir / item.name)
        shutil.rmtree(self.tmp, ignore_errors=True)
        return False


def _stem(path) -> str:
    name = Path(path).name
    for suf in NII_SUFFIXES:
        if name.endswith(suf):
            return name[: -len(suf)]
    return Path(name).stem


def _exit_code(exc: BaseException) -> int:
    from .active_contours import DegenerateContourError
    from .preprocess import NoSkullError
    from .registration import RegistrationError
    from .seg_pipeline import PipelineError
    from .volume_core import VolumeIOError

    if isinstance(exc, PipelineError):
        if exc.registration_failed or exc.stage in ("skull_extraction", "registration"):
            return EXIT_REGISTRATION
        if exc.degenerate_contour:
            return EXIT_CONTOUR
        return _exit_code(exc.cause)
    if isinstance(exc, (RegistrationError, NoSkullError)):
        return EXIT_REGISTRATION
    if isinstance(exc, DegenerateContourError):
        return EXIT_CONTOUR
    if isinstance(exc, (VolumeIOError, OSError)):
        return EXIT_IO
    return EXIT_ERROR


def _require(path, what: str, directory: bool = False) -> Path:
    from .volume_core import VolumeIOError

    path = Path(path)
    ok = path.is_dir() if directory else path.is_file()
    if not ok:
        raise VolumeIOError(f"{what} not found: {path}")
    return path


# ------------------------------------------------------------------- segment


def _pipeline_config(args):
    from .preprocess import DenoiseParams, SkullThreshold
    from .seg_pipeline import PipelineConfig

    config = PipelineConfig.load(_require(args.config, "config file")) if args.config else PipelineConfig()
    skull = config.skull if args.skull_hu is None else SkullThreshold(args.skull_hu)
    dn = asdict(config.denoise)
    for key, flag in (("h", args.nlm_h), ("patch_radius", args.nlm_patch), ("search_radius", args.nlm_search)):
        if flag is not None:
            dn[key] = flag
    seed = config.rng_seed if args.seed is None else args.seed
    return replace(config, skull=skull, denoise=DenoiseParams(**dn), rng_seed=seed)


def _segment_one(scan_path: str, template_dir: str, model_path: str, config_dict: dict, seeds_path,
                 out_dir: str, overlays: bool):
    """Segment one scan into ``out_dir``; returns (subject, exit code, outputs, message)."""
    from .registration import TemplateSpace
    from .seg_pipeline import PipelineConfig, SeedSpec, save_overlays, segment_subject
    from .tissue_classifier import RandomForestModel
    from .volume_core import load_volume, save_volume

    subject = _stem(scan_path)
    try:
        template = TemplateSpace.load(template_dir)
        model = RandomForestModel.load(_require(model_path, "tissue model"))
        config = PipelineConfig.from_dict(config_dict)
        seeds = SeedSpec.from_dict(json.loads(Path(seeds_path).read_text())) if seeds_path else None
        scan = load_volume(scan_path)
        result = segment_subject(scan, template, model, seeds, config, subject)
        with _Staging(out_dir) as tmp:
            save_volume(result.labels, tmp / "seg.nii.gz")
            report = result.report.to_dict()
            (tmp / "report.json").write_text(json.dumps(report, indent=2, default=float))
            if overlays:
                save_overlays(scan, result.labels, tmp)
            names = sorted(p.name for p in tmp.iterdir())
        return subject, EXIT_OK, [str(Path(out_dir) / n) for n in names], ""
    except Exception as exc:  # reported per subject; the batch carries on
        return subject, _exit_code(exc), [], f"{type(exc).__name__}: {exc}"


def cmd_segment(args) -> int:
    config = _pipeline_config(args)
    out = Path(args.out)
    scans = [str(s) for s in args.scan]
    single = len(scans) == 1
    out_dirs = [str(out) if single else str(out / _stem(s)) for s in scans]
    manifest = RunManifest(
        "segment", config.param_hash(),
        {"scan": scans, "template": args.template, "tissue_model": args.tissue_model,
         "config": args.config, "seeds": args.seeds},
        rng_seeds={"pipeline": config.rng_seed},
    )
    if args.manifest_only:
        manifest.outputs = [str(Path(d) / "seg.nii.gz") for d in out_dirs]
        manifest.write(out / "manifest.json")
        return EXIT_OK
    _require(args.template, "template directory", directory=True)
    _require(args.tissue_model, "tissue model")

    t0 = time.time()
    manifest.started = datetime.now(timezone.utc).isoformat()
    jobs = [(s, args.template, args.tissue_model, config.to_dict(), args.seeds, d, not args.no_overlays)
            for s, d in zip(scans, out_dirs)]
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_segment_one, *zip(*jobs)))
    else:
        results = [_segment_one(*j) for j in jobs]

    code = EXIT_OK
    errors = []
    for subject, rc, outputs, msg in results:
        manifest.outputs.extend(outputs)
        if rc != EXIT_OK:
            errors.append(f"{subject}: {msg}")
            print(f"error: {subject}: {msg}", file=sys.stderr)
            code = code or rc
        else:
            print(f"{subject}: ok")
    manifest.wall_time_s = time.time() - t0
    manifest.status = "ok" if code == EXIT_OK else "failed"
    manifest.error = "; ".join(errors) or None
    manifest.write(out / "manifest.json")
    return code


# -------------------------------------------------------------- train-tissue


def cmd_train_tissue(args) -> int:
    from .registration import TemplateSpace, to_template
    from .seg_pipeline import PipelineConfig, annotate_from_labels, register_and_denoise, seg_to_tissue
    from .tissue_classifier import ForestParams, load_annotations, train_tissue_model
    from .volume_core import load_labels, load_volume

    params = ForestParams(args.n_estimators, args.max_depth, args.min_samples_split, args.max_features)
    out = Path(args.out)
    report_path = out.with_name(f"{_stem(out)}_report.json")
    manifest = RunManifest(
        "train-tissue", _hash({"forest": asdict(params), "raw": args.raw_features, "n": args.n_annotations}),
        {"scan": args.scan, "annotations": args.annotations, "truth": args.truth, "template": args.template},
        [str(out), str(report_path)], {"forest": args.seed, "annotations": args.seed},
    )
    manifest_path = out.with_name(f"{_stem(out)}_manifest.json")
    if args.manifest_only:
        manifest.write(manifest_path)
        return EXIT_OK

    t0 = time.time()
    manifest.started = datetime.now(timezone.utc).isoformat()
    scan = load_volume(_require(args.scan, "scan"))
    config = PipelineConfig(rng_seed=args.seed)
    transform = None
    if args.template:
        template = TemplateSpace.load(_require(args.template, "template directory", directory=True))
        transform, _, scan = register_and_denoise(scan, template, config, _stem(args.scan))
    if args.annotations:
        ann = load_annotations(_require(args.annotations, "annotations"), scan.dims)
    else:
        truth = load_labels(_require(args.truth, "truth labels"))
        if transform is not None:
            truth = to_template(truth, transform, template, "nearest")
        if truth.dims != scan.dims:
            raise ValueError(f"truth grid {truth.dims} does not match the scan grid {scan.dims}")
        ann = annotate_from_labels(seg_to_tissue(truth.data), args.n_annotations, args.seed)
    model = train_tissue_model(scan, ann, params, args.seed, raw_only=args.raw_features)

    from .tissue_classifier import extract_features, training_set

    X, y = training_set(extract_features(scan, raw_only=args.raw_features), ann)
    pred = model.predict(X)
    report = {
        "n_annotations": int(len(y)),
        "class_counts": np.bincount(y, minlength=model.n_classes).tolist(),
        "training_accuracy": float(np.mean(pred == y)),
        "forest": asdict(params),
        "rng_seed": args.seed,
    }
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out)
    tmp = report_path.with_name(f".tmp-{report_path.name}")
    tmp.write_text(json.dumps(report, indent=2))
    os.replace(tmp, report_path)
    print(f"training accuracy {report['training_accuracy']:.4f} on {report['n_annotations']} voxels")
    manifest.wall_time_s = time.time() - t0
    manifest.status = "ok"
    manifest.write(manifest_path)
    return EXIT_OK


# ------------------------------------------------------------------- predict


def _predict_settings(args):
    from .nph_predict import CvPlan, SvmParams
    from .tissue_classifier import ForestParams

    cfg = {}
    if args.config:
        cfg = json.loads(_require(args.config, "config file").read_text())
        unknown = set(cfg) - {"svm", "forest", "cv"}
        if unknown:
            raise ValueError(f"unknown predict config section(s): {', '.join(sorted(unknown))}")
    svm = SvmParams(**cfg.get("svm", {}))
    forest = ForestParams(**cfg.get("forest", {}))
    cv = dict(cfg.get("cv", {}))
    if args.repeats is not None:
        cv["n_repeats"] = args.repeats
    if args.seed is not None:
        cv["rng_seed"] = args.seed
    return svm, forest, cv, CvPlan


def cmd_predict(args) -> int:
    from .nph_predict import (
        FEATURES,
        EvansClassifier,
        ForestClassifier,
        SvmClassifier,
        evaluate_all,
        feature_importance,
        importance_boxplot,
        read_cohort,
    )

    svm, forest, cv, CvPlan = _predict_settings(args)
    settings = {"classifier": args.classifier, "svm": asdict(svm), "forest": asdict(forest), "cv": cv}
    out = Path(args.out)
    manifest = RunManifest("predict", _hash(settings), {"cohort": args.cohort, "config": args.config},
                           rng_seeds={"cv": cv.get("rng_seed", 0)})
    if args.manifest_only:
        manifest.write(out / "manifest.json")
        return EXIT_OK

    t0 = time.time()
    manifest.started = datetime.now(timezone.utc).isoformat()
    records = read_cohort(_require(args.cohort, "cohort CSV"))
    cv.setdefault("cohort_size", len(records))
    if "test_size" not in cv:
        cv["test_size"] = max(1, int(round(len(records) * 11 / 61)))
    plan = CvPlan(**cv)
    classifier = {"svm": lambda: SvmClassifier(svm), "rf": lambda: ForestClassifier(forest),
                  "evans": EvansClassifier}[args.classifier]()
    from .nph_predict import run_cv

    summary = run_cv(records, classifier, plan)
    metrics = summary.to_dict()
    sens, spec = evaluate_all(records, classifier, plan.rng_seed)
    metrics["all_subjects"] = {"sensitivity": sens, "specificity": spec}
    metrics["n_subjects"] = len(records)
    with _Staging(out) as tmp:
        (tmp / "metrics.json").write_text(json.dumps(metrics, indent=2))
        (tmp / "per_repeat.csv").write_text(summary.per_repeat_csv())
        if args.classifier == "svm":
            imp = feature_importance(records, classifier, plan)
            importance_boxplot(imp, FEATURES[: imp.shape[1]], tmp / "importance.png")
        names = sorted(p.name for p in tmp.iterdir())
    manifest.outputs = [str(out / n) for n in names]
    ts, tp = metrics["test_sensitivity"], metrics["test_specificity"]
    print(f"{args.classifier}: test sensitivity {ts[0]:.3f} ± {ts[1]:.3f}, "
          f"specificity {tp[0]:.3f} ± {tp[1]:.3f}")
    manifest.wall_time_s = time.time() - t0
    manifest.status = "ok"
    manifest.write(out / "manifest.json")
    return EXIT_OK


# ------------------------------------------------------------------- phantom


def _write_one_phantom(spec_json: str, out_dir: str, name: str) -> list:
    from .phantom_eval import PhantomSpec, generate_phantom, write_phantom

    spec = PhantomSpec.from_json(spec_json)
    ph = generate_phantom(spec)
    write_phantom(ph, out_dir, name)
    meta = {"spec": json.loads(spec.to_json()), "volumes_ml": {k: float(v) for k, v in ph.volumes_ml.items()}}
    (Path(out_dir) / f"{name}.json").write_text(json.dumps(meta, indent=2))
    return [str(Path(out_dir) / f"{name}{s}") for s in ("_ct.nii.gz", "_truth.nii.gz", ".json")]


def cmd_phantom(args) -> int:
    from .phantom_eval import PhantomSpec

    if args.spec:
        base = PhantomSpec.from_json(_require(args.spec, "phantom spec").read_text())
        specs = [replace(base, rng_seed=base.rng_seed + i) for i in range(args.n)]
    else:
        specs = [PhantomSpec.from_table2("normal" if i % 2 == 0 else "nph", rng_seed=args.seed + i,
                                         max_rotation_deg=5.0, max_translation_mm=3.0)
                 for i in range(args.n)]
    out = Path(args.out)
    manifest = RunManifest("phantom", _hash([asdict(s) for s in specs]), {"spec": args.spec, "n": args.n},
                           rng_seeds={"phantoms": [s.rng_seed for s in specs]})
    if args.manifest_only:
        manifest.write(out / "manifest.json")
        return EXIT_OK
    t0 = time.time()
    manifest.started = datetime.now(timezone.utc).isoformat()
    names = [f"phantom_{i:03d}" for i in range(args.n)]
    with _Staging(out) as tmp:
        jobs = [(s.to_json(), str(tmp), n) for s, n in zip(specs, names)]
        if args.jobs > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                list(pool.map(_write_one_phantom, *zip(*jobs)))
        else:
            for j in jobs:
                _write_one_phantom(*j)
        files = sorted(p.name for p in tmp.iterdir())
    manifest.outputs = [str(out / f) for f in files]
    manifest.wall_time_s = time.time() - t0
    manifest.status = "ok"
    manifest.write(out / "manifest.json")
    print(f"wrote {args.n} phantom(s) to {out}")
    return EXIT_OK


# ------------------------------------------------------------------ evaluate


def _key(path: Path) -> str:
    name = _stem(path)
    for suf in NAME_SUFFIXES:
        if name.endswith(suf):
            return name[: -len(suf)]
    return name


def _nii_files(directory: Path) -> list:
    return sorted(p for p in directory.iterdir() if p.is_file() and p.name.endswith(NII_SUFFIXES))


def _label_files(directory: Path) -> dict:
    """``key -> path`` for label maps directly in ``directory`` or as ``<key>/seg.nii.gz``."""
    found = {_key(p): p for p in _nii_files(directory)}
    for sub in sorted(p for p in directory.iterdir() if p.is_dir()):
        if (sub / "seg.nii.gz").is_file():
            found[_key(sub)] = sub / "seg.nii.gz"
    return found


def _prediction_sets(pred_dir: Path) -> dict:
    """``method -> {key -> path}``; subdirectories without ``seg.nii.gz`` are methods."""
    sets = {}
    direct = _label_files(pred_dir)
    if direct:
        sets[pred_dir.name] = direct
    for sub in sorted(p for p in pred_dir.iterdir() if p.is_dir() and not (p / "seg.nii.gz").is_file()):
        files = _label_files(sub)
        if files:
            sets[sub.name] = files
    return sets


def cmd_evaluate(args) -> int:
    from .phantom_eval import MethodScore, dice, summarize_scores, summary_csv, format_table
    from .seg_pipeline import SegLabel
    from .volume_core import load_labels

    pred_dir = _require(args.pred, "prediction directory", directory=True)
    truth_dir = _require(args.truth, "truth directory", directory=True)
    out = Path(args.out)
    manifest = RunManifest("evaluate", _hash({}), {"pred": args.pred, "truth": args.truth}, [str(out)])
    manifest_path = out.with_name(f"{_stem(out)}_manifest.json")
    if args.manifest_only:
        manifest.write(manifest_path)
        return EXIT_OK
    t0 = time.time()
    manifest.started = datetime.now(timezone.utc).isoformat()
    truths = _label_files(truth_dir)
    if not truths:
        raise ValueError(f"no NIfTI label maps in {truth_dir}")
    sets = _prediction_sets(pred_dir)
    if not sets:
        raise ValueError(f"no NIfTI label maps in {pred_dir}")
    scores = []
    for method, preds in sets.items():
        for key, tpath in sorted(truths.items()):
            truth = load_labels(tpath)
            if key not in preds:
                log.warning("%s: no prediction for %s", method, key)
                scores.append(MethodScore(method, key, 0.0, 0.0, True))
                continue
            pred = load_labels(preds[key])
            if not pred.geometry.same_as(truth.geometry):
                raise ValueError(f"geometry mismatch between {preds[key]} and {tpath}")
            scores.append(MethodScore(method, key, dice(pred, truth, SegLabel.VENTRICLE).dice,
                                      dice(pred, truth, SegLabel.CEREBRAL_MASS).dice))
    summary = summarize_scores(scores, tuple(sets))
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_name(f".tmp-{out.name}")
    tmp.write_text(summary_csv(summary))
    os.replace(tmp, out)
    print(format_table(summary))
    manifest.wall_time_s = time.time() - t0
    manifest.status = "ok"
    manifest.write(manifest_path)
    return EXIT_OK


# ------------------------------------------------------------------- compare


def cmd_compare(args) -> int:
    from .phantom_eval import (
        METHODS,
        compare_methods,
        format_table,
        make_test_template,
        phantom_batch,
        summarize_scores,
        summary_csv,
        train_phantom_model,
    )
    from .seg_pipeline import PipelineConfig
    from .tissue_classifier import RandomForestModel

    out = Path(args.out)
    manifest = RunManifest("compare", PipelineConfig().param_hash(), {"n": args.n, "seed": args.seed},
                           [str(out)], {"phantoms": list(range(args.seed, args.seed + args.n))})
    manifest_path = out.with_name(f"{_stem(out)}_manifest.json")
    if args.manifest_only:
        manifest.write(manifest_path)
        return EXIT_OK
    t0 = time.time()
    manifest.started = datetime.now(timezone.utc).isoformat()
    template, _ = make_test_template()
    model = RandomForestModel.load(_require(args.tissue_model, "tissue model")) if args.tissue_model \
        else train_phantom_model(template)
    scores = compare_methods(phantom_batch(args.n, base_seed=args.seed), METHODS, template, model)
    summary = summarize_scores(scores)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_name(f".tmp-{out.name}")
    tmp.write_text(summary_csv(summary))
    os.replace(tmp, out)
    print(format_table(summary))
    manifest.wall_time_s = time.time() - t0
    manifest.status = "ok"
    manifest.write(manifest_path)
    return EXIT_OK


# ------------------------------------------------------------- make-template


def cmd_make_template(args) -> int:
    from .phantom_eval import make_test_template
    from .volume_core import save_volume

    out = Path(args.out)
    manifest = RunManifest("make-template", _hash({"dims": args.dims, "spacing": args.spacing}),
                           {}, [str(out / "template.json")])
    if args.manifest_only:
        manifest.write(out / "manifest.json")
        return EXIT_OK
    t0 = time.time()
    manifest.started = datetime.now(timezone.utc).isoformat()
    template, ph = make_test_template(tuple(args.dims), tuple(args.spacing))
    with _Staging(out) as tmp:
        template.save(tmp)
        save_volume(ph.image, tmp / "template_ct.nii.gz")
        save_volume(ph.truth, tmp / "template_labels.nii.gz")
        files = sorted(p.name for p in tmp.iterdir())
    manifest.outputs = [str(out / f) for f in files]
    manifest.wall_time_s = time.time() - t0
    manifest.status = "ok"
    manifest.write(out / "manifest.json")
    print(f"template written to {out}")
    return EXIT_OK


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nphct", description="CT ventricle segmentation and NPH prediction.")
    p.add_argument("--version", action="version", version=f"nphct {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--manifest-only", action="store_true",
                        help="write the run manifest without doing the work")

    s = sub.add_parser("segment", help="segment head CT scan(s) and report compartment volumes")
    s.add_argument("--scan", nargs="+", required=True, help="NIfTI scan(s)")
    s.add_argument("--template", required=True, help="template directory")
    s.add_argument("--tissue-model", required=True, help="tissue forest JSON")
    s.add_argument("--config", help="pipeline config JSON")
    s.add_argument("--seeds", help="seed spec JSON overriding the template's")
    s.add_argument("--out", required=True, help="output directory (one subdirectory per scan if several)")
    s.add_argument("--skull-hu", type=float, help="skull threshold (HU)")
    s.add_argument("--nlm-h", type=float, help="denoising filter strength")
    s.add_argument("--nlm-patch", type=int, help="denoising patch radius (voxels)")
    s.add_argument("--nlm-search", type=int, help="denoising search radius (voxels)")
    s.add_argument("--seed", type=int, help="pipeline RNG seed")
    s.add_argument("--no-overlays", action="store_true", help="skip overlay PNGs")
    s.add_argument("--jobs", type=int, default=1, help="subjects processed in parallel")
    common(s)
    s.set_defaults(func=cmd_segment)

    t = sub.add_parser("train-tissue", help="train the voxel tissue forest")
    t.add_argument("--scan", required=True, help="training scan (NIfTI)")
    src = t.add_mutually_exclusive_group(required=True)
    src.add_argument("--annotations", help="CSV of x,y,z,class_id rows")
    src.add_argument("--truth", help="SegLabel ground truth to sample annotations from")
    t.add_argument("--template", help="register and denoise the scan into this template first")
    t.add_argument("--out", required=True, help="model JSON path")
    t.add_argument("--n-annotations", type=int, default=10000, help="samples drawn with --truth")
    t.add_argument("--n-estimators", type=int, default=200)
    t.add_argument("--max-depth", type=int, default=4)
    t.add_argument("--min-samples-split", type=int, default=3)
    t.add_argument("--max-features", type=int, default=2)
    t.add_argument("--raw-features", action="store_true", help="intensity feature only")
    t.add_argument("--seed", type=int, default=0)
    common(t)
    t.set_defaults(func=cmd_train_tissue)

    r = sub.add_parser("predict", help="cross-validated NPH prediction on a cohort CSV")
    r.add_argument("--cohort", required=True, help="cohort CSV")
    r.add_argument("--classifier", required=True, choices=("svm", "rf", "evans"))
    r.add_argument("--config", help="JSON with optional svm / forest / cv sections")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--repeats", type=int, help="number of train/test splits")
    r.add_argument("--seed", type=int, help="split RNG seed")
    common(r)
    r.set_defaults(func=cmd_predict)

    h = sub.add_parser("phantom", help="write synthetic head phantoms")
    h.add_argument("--spec", help="phantom spec JSON (default: alternating normal/NPH means)")
    h.add_argument("--n", type=int, default=1, help="number of phantoms")
    h.add_argument("--out", required=True, help="output directory")
    h.add_argument("--seed", type=int, default=0, help="first seed when no spec is given")
    h.add_argument("--jobs", type=int, default=1)
    common(h)
    h.set_defaults(func=cmd_phantom)

    e = sub.add_parser("evaluate", help="Dice table of predicted vs truth label maps")
    e.add_argument("--pred", required=True, help="prediction directory (subdirectories = methods)")
    e.add_argument("--truth", required=True, help="truth directory")
    e.add_argument("--out", required=True, help="CSV path")
    common(e)
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("compare", help="run every method on a phantom batch")
    c.add_argument("--n", type=int, default=10)
    c.add_argument("--seed", type=int, default=0, help="first phantom seed")
    c.add_argument("--tissue-model", help="forest JSON (default: train on a phantom)")
    c.add_argument("--out", required=True, help="CSV path")
    common(c)
    c.set_defaults(func=cmd_compare)

    m = sub.add_parser("make-template", help="write the synthetic test template")
    m.add_argument("--out", required=True, help="template directory")
    m.add_argument("--dims", type=int, nargs=3, default=(128, 128, 128))
    m.add_argument("--spacing", type=float, nargs=3, default=(1.5, 1.5, 1.5))
    common(m)
    m.set_defaults(func=cmd_make_template)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except Exception as exc:
        code = _exit_code(exc)
        print(f"error: {exc}", file=sys.stderr)
        log.debug("failure detail", exc_info=True)
        return code


if __name__ == "__main__":
    sys.exit(main())
