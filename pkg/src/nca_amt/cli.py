"""Command-line entry point: ``nca-amt <command> [options]``.

Exit status is 0 on success, 1 when inputs fail validation (or a split fails
verification, or training diverges), and 2 on usage errors. Logs go to
stderr; ``--json`` puts a machine-readable result on stdout. Every command
that writes files leaves one ``run_manifest.json`` in its output directory.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
import warnings
from collections import Counter
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from . import amtnet, manifest, metrics, nca, splits, synthgen

log = logging.getLogger("nca_amt")

RUN_MANIFEST = "run_manifest.json"
DEFAULT_MAGNITUDES = {"scene": 0.5, "object": 0.5}


class ValidationFailure(Exception):
    """Raised when a command ran but its result did not pass validation."""


# ---------------------------------------------------------------------------
# run manifests and output helpers

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _stamp() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


def write_run_manifest(outdir, command: str, params: dict, inputs, seed, started: str) -> dict:
    """Record what produced ``outdir``; output hashes cover every other file in it.

    ``inputs`` is a list of paths or a mapping of display name to path.
    """
    out = Path(outdir)
    if not isinstance(inputs, dict):
        inputs = {str(p): p for p in inputs}
    outputs = {p.name: sha256_file(p) for p in sorted(out.iterdir())
               if p.is_file() and p.name != RUN_MANIFEST}
    doc = {
        "command": command,
        "parameters": params,
        "inputs": {k: sha256_file(p) for k, p in sorted(inputs.items())},
        "outputs": outputs,
        "tool_version": __version__,
        "seed": seed,
        "timestamps": {"started": started, "finished": _stamp()},
    }
    (out / RUN_MANIFEST).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _write_json(path, obj) -> None:
    Path(path).write_text(_dump(obj))


def _emit(args, result: dict, text: str | None = None) -> None:
    if args.json:
        sys.stdout.write(_dump(result))
    elif text is not None:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _families(text: str) -> list[str]:
    fams = [f.strip() for f in text.split(",") if f.strip()]
    if not fams:
        raise argparse.ArgumentTypeError("expected a comma-separated list of families")
    return fams


def _thresholds(text: str) -> np.ndarray:
    try:
        return nca.parse_thresholds(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _load_spec(text: str, seed: int | None) -> synthgen.SynthSpec:
    spec = synthgen.default_benchmark() if text == "default" else synthgen.SynthSpec.load(text)
    if seed is not None:
        spec.seed = seed
    spec.validate()
    return spec


def _model_path(text: str) -> Path:
    p = Path(text)
    return p / "model" if p.is_dir() else p.with_suffix("")


# ---------------------------------------------------------------------------
# commands

def cmd_ingest(args) -> int:
    started = _stamp()
    m = manifest.ingest(args.input, args.format)
    if args.min_class_size:
        m = manifest.filter_min_class_size(m, args.min_class_size)
    u = m.universe
    counts = {u.name_of(u.primary, a): n for a, n in
              sorted(Counter(r.primary_label for r in m.records).items())}
    result = {"n_records": len(m.records), "families": list(u.families), "primary": u.primary,
              "labels": {f: len(u.labels[f]) for f in u.families}, "class_counts": counts}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        manifest.emit(m, out / f"manifest.{args.out_format}", args.out_format)
        write_run_manifest(out, "ingest", {"format": args.format, "min_class_size":
                                           args.min_class_size}, [args.input], args.seed, started)
    _emit(args, result, f"{len(m.records)} records, {len(u.labels[u.primary])} {u.primary} labels")
    return 0


def _nca_text(report: dict) -> str:
    lines = [f"{'family':<10} {'score':>7} {'sign':>5}  sweep"]
    for fam, rep in report["families"].items():
        lines.append(f"{fam:<10} {rep['score']:7.3f} {rep['sign']:>+5d}  {rep['sweep']}")
    return "\n".join(lines)


def cmd_nca(args) -> int:
    started = _stamp()
    m = manifest.ingest(args.manifest)
    report = nca.run(m, args.families, args.thresholds, args.mode, args.cutoff)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "nca.json").write_text(nca.dumps(report) + "\n")
        write_run_manifest(out, "nca", _nca_params(args), [args.manifest], args.seed, started)
    _emit(args, report, _nca_text(report))
    return 0


def _nca_params(args) -> dict:
    grid = args.thresholds
    return {"families": args.families, "mode": args.mode, "cutoff": args.cutoff,
            "thresholds": None if grid is None else [float(t) for t in grid]}


def cmd_split(args) -> int:
    started = _stamp()
    m = manifest.ingest(args.manifest)
    s = splits.build_split(m, args.variant, args.min_class_size, args.val_fraction,
                           seed=args.seed, family=args.family, repair=not args.no_repair,
                           tie_break=args.tie_break)
    report = splits.verify_split(m, s)
    summary = {"name": s.name, "n_train": len(s.train_ids), "n_val": len(s.val_ids),
               "achieved_val_fraction": s.achieved_val_fraction, "warnings": s.warnings,
               "verify": report.to_dict()}
    if args.out:
        splits.write_split(s, m, args.out, report)
        write_run_manifest(args.out, "split", dict(s.params), [args.manifest], args.seed, started)
    _emit(args, summary, f"{s.name}: {len(s.train_ids)} train / {len(s.val_ids)} val, "
                         f"verify {'passed' if report.passed else 'FAILED'}")
    if not report.passed:
        raise ValidationFailure("split verification failed: " + "; ".join(report.failures))
    return 0


def write_synth(spec: synthgen.SynthSpec, outdir) -> dict:
    """Generate train/val/probe data and write manifest, features, and id lists."""
    train, val = synthgen.generate(spec)
    probe = synthgen.generate_probe(spec)
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    m = synthgen.to_manifest(spec, train, val, probe)
    manifest.emit(m, out / "manifest.jsonl")
    metrics.write_matrix(out / "features.bin", np.vstack([train.x, val.x, probe.x]))
    for name, ds in (("train", train), ("val", val), ("probe", probe)):
        (out / f"{name}.txt").write_text("".join(f"{i}\n" for i in ds.ids))
    (out / "spec.json").write_text(spec.to_json() + "\n")
    return {"n_train": len(train), "n_val": len(val), "n_probe": len(probe),
            "input_dim": spec.input_dim, "regime": spec.regime, "seed": spec.seed}


def cmd_synth(args) -> int:
    started = _stamp()
    spec = _load_spec(args.spec, args.seed)
    result = write_synth(spec, args.out)
    inputs = [] if args.spec == "default" else [args.spec]
    write_run_manifest(args.out, "synth", {"spec": json.loads(spec.to_json())}, inputs,
                       spec.seed, started)
    _emit(args, result, f"wrote {result['n_train']} train / {result['n_val']} val / "
                        f"{result['n_probe']} probe samples to {args.out}")
    return 0


def build_model_config(model_doc: dict, m: manifest.Manifest, input_dim: int,
                       signs: dict | None = None) -> amtnet.ModelConfig:
    """Fill data-dependent sizes into a model section and apply optional signs."""
    u = m.universe
    doc = dict(model_doc)
    doc.setdefault("input_dim", input_dim)
    doc.setdefault("n_classes", u.size(u.primary))
    heads = []
    for h in doc.get("heads", []):
        h = dict(h)
        u.check_family(h["family"])
        h.setdefault("n_classes", u.size(h["family"]))
        h.setdefault("weight", 0.0)
        heads.append(h)
    doc["heads"] = heads
    cfg = amtnet.ModelConfig(**doc)
    if signs:
        mags = {h.family: (abs(h.weight) or DEFAULT_MAGNITUDES.get(h.family, 0.5))
                for h in cfg.heads}
        cfg = cfg.with_signs({h.family: signs.get(h.family, 0) for h in cfg.heads}, mags)
    return cfg


def _datasets(m, features, train_ids, val_ids, probe_ids=None):
    ref = m.subset(train_ids)
    make = lambda ids: amtnet.Dataset.from_manifest(m, features, ids, reference=ref)  # noqa: E731
    return make(train_ids), make(val_ids), (make(probe_ids) if probe_ids else None)


def run_training(m, features, train_ids, val_ids, probe_ids, model_cfg: amtnet.ModelConfig,
                 train_cfg: amtnet.TrainConfig, outdir) -> dict:
    """Train, write checkpoint/config/epoch CSV/summary into ``outdir``, return the summary."""
    dtr, dva, dpr = _datasets(m, features, train_ids, val_ids, probe_ids)
    model = amtnet.AMTNet(model_cfg, train_cfg.seed)
    res = amtnet.train(model, train_cfg, dtr, dva, dpr)
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    res.model.save(out / "model")
    amtnet.save_config(out / "config.json", model_cfg, train_cfg)
    amtnet.write_reports_csv(out / "epochs.csv", res.reports)
    summary = {
        "best_epoch": res.best_epoch,
        "best_val_acc": res.reports[res.best_epoch - 1].val_acc,
        "final_val_acc": res.reports[-1].val_acc,
        "final_probe_acc": res.reports[-1].probe_acc,
        "peak_probe_acc": max((r.probe_acc for r in res.reports if r.probe_acc is not None),
                              default=None),
        "weights": model_cfg.weights(),
        "epochs": [r.row() for r in res.reports],
    }
    _write_json(out / "summary.json", summary)
    return summary


def cmd_train(args) -> int:
    started = _stamp()
    m = manifest.ingest(args.manifest)
    features = metrics.load_features(args.features)
    model_doc, train_cfg = amtnet.load_config(args.config)
    if args.seed is not None:
        train_cfg.seed = args.seed
    if args.epochs is not None:
        train_cfg.epochs = args.epochs
    signs = json.loads(Path(args.signs).read_text())["signs"] if args.signs else None
    model_cfg = build_model_config(model_doc, m, features.shape[1], signs)
    probe = splits.read_ids(args.probe) if args.probe else None
    summary = run_training(m, features, splits.read_ids(args.train), splits.read_ids(args.val),
                           probe, model_cfg, train_cfg, args.out)
    inputs = [p for p in (args.config, args.train, args.val, args.manifest, args.features,
                          args.probe, args.signs) if p]
    write_run_manifest(args.out, "train", {"model": _plain(model_cfg), "train": _plain(train_cfg)},
                       inputs, train_cfg.seed, started)
    brief = {k: v for k, v in summary.items() if k != "epochs"}
    _emit(args, brief, f"best epoch {summary['best_epoch']}: val acc {summary['best_val_acc']:.4f}")
    return 0


def _plain(cfg) -> dict:
    return asdict(cfg)


def cmd_eval(args) -> int:
    started = _stamp()
    m = manifest.ingest(args.manifest)
    features = metrics.load_features(args.features)
    model = amtnet.AMTNet.load(_model_path(args.model))
    ids = splits.read_ids(args.ids) if args.ids else None
    ref = m.subset(splits.read_ids(args.reference)) if args.reference else None
    ds = amtnet.Dataset.from_manifest(m, features, ids, reference=ref)
    result = amtnet.evaluate(model, ds, args.family)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "eval.json", result)
        inputs = [p for p in (args.manifest, args.features, args.ids, args.reference) if p]
        inputs += [str(_model_path(args.model).with_suffix(s)) for s in (".bin", ".json")]
        write_run_manifest(out, "eval", {"family": args.family}, inputs, args.seed, started)
    dc = result.get("dcorr2")
    _emit(args, result, f"n={result['n']} accuracy {result['accuracy']:.4f}"
                        + ("" if dc is None else f" dcorr2 {dc:.4f}"))
    return 0


def cmd_dcorr(args) -> int:
    x = metrics.load_features(args.features)
    y = metrics.load_labels(args.labels)
    value = metrics.dcorr2(x, y)
    _emit(args, {"dcorr2": value, "n": int(x.shape[0])}, f"{value:.6f}")
    return 0


# ---------------------------------------------------------------------------
# pipeline

def comparison_table(rows: list[dict]) -> str:
    head = "| model | lambda(scene) | gamma(object) | val acc | probe dcorr2 | final probe acc | best epoch |"
    sep = "|---|---:|---:|---:|---:|---:|---:|"
    lines = [head, sep]
    for r in rows:
        lines.append(f"| {r['model']} | {r['lambda']:+.2f} | {r['gamma']:+.2f} | "
                     f"{r['val_acc']:.4f} | {r['probe_dcorr2']:.4f} | "
                     f"{r['final_probe_acc']:.4f} | {r['best_epoch']} |")
    return "\n".join(lines) + "\n"


def run_pipeline(spec: synthgen.SynthSpec, outdir, magnitudes: dict, epochs: int | None = None,
                 mode: str = "grad-reversal") -> dict:
    """synth -> nca -> split -> train baseline and AMT -> eval; returns the report."""
    out = Path(outdir)
    seed = spec.seed

    started = _stamp()
    synth_dir = out / "synth"
    write_synth(spec, synth_dir)
    write_run_manifest(synth_dir, "synth", {"spec": json.loads(spec.to_json())}, [], seed, started)
    m = manifest.ingest(synth_dir / "manifest.jsonl")
    features = metrics.read_matrix(synth_dir / "features.bin")
    ids = {k: splits.read_ids(synth_dir / f"{k}.txt") for k in ("train", "val", "probe")}
    # keyed relative to the run root so manifests compare equal across output locations
    synth_inputs = {f"synth/{n}": synth_dir / n for n in ("manifest.jsonl", "features.bin")}
    manifest_input = {"synth/manifest.jsonl": synth_dir / "manifest.jsonl"}

    # necessity is judged on every generated record, training and validation alike
    started = _stamp()
    nca_dir = out / "nca"
    nca_dir.mkdir(parents=True, exist_ok=True)
    nca_report = nca.run(m, ["scene", "object"])
    (nca_dir / "nca.json").write_text(nca.dumps(nca_report) + "\n")
    write_run_manifest(nca_dir, "nca", {"families": ["scene", "object"]}, manifest_input,
                       seed, started)
    signs = nca_report["signs"]

    started = _stamp()
    split_dir = out / "split"
    train_m = m.subset(ids["train"])
    split = splits.build_split(train_m, 1, seed=seed)
    verify = splits.verify_split(train_m, split)
    splits.write_split(split, train_m, split_dir, verify)
    write_run_manifest(split_dir, "split", dict(split.params), manifest_input, seed, started)
    if not verify.passed:
        raise ValidationFailure("split verification failed: " + "; ".join(verify.failures))

    train_cfg = amtnet.benchmark_train_config(seed)
    train_cfg.mode = mode
    if epochs is not None:
        train_cfg.epochs = epochs
    heads = [{"family": "scene"}, {"family": "object"}]
    configs = {
        "baseline": build_model_config({}, m, features.shape[1]),
        "amt": build_model_config({"heads": [dict(h, weight=magnitudes[h["family"]])
                                             for h in heads]}, m, features.shape[1], signs),
    }
    dpr = amtnet.Dataset.from_manifest(m, features, ids["probe"], reference=train_m)
    dva = amtnet.Dataset.from_manifest(m, features, ids["val"], reference=train_m)
    rows, models = [], {}
    for name, cfg in configs.items():
        started = _stamp()
        summary = run_training(m, features, ids["train"], ids["val"], ids["probe"], cfg,
                               train_cfg, out / name)
        write_run_manifest(out / name, "train", {"model": _plain(cfg), "train": _plain(train_cfg)},
                           synth_inputs, seed, started)
        model = amtnet.AMTNet.load(out / name / "model")
        val_eval = amtnet.evaluate(model, dva, "scene")
        probe_eval = amtnet.evaluate(model, dpr, "scene")
        w = cfg.weights()
        rows.append({"model": name, "lambda": w.get("scene", 0.0), "gamma": w.get("object", 0.0),
                     "val_acc": val_eval["accuracy"], "probe_dcorr2": probe_eval["dcorr2"],
                     "final_probe_acc": summary["final_probe_acc"],
                     "best_epoch": summary["best_epoch"]})
        models[name] = {"summary": {k: v for k, v in summary.items() if k != "epochs"},
                        "val": val_eval, "probe": probe_eval}

    report = {
        "spec": json.loads(spec.to_json()),
        "nca": {"signs": signs,
                "scores": {f: r["score"] for f, r in nca_report["families"].items()}},
        "split": {"name": split.name, "n_train": len(split.train_ids),
                  "n_val": len(split.val_ids), "verify_passed": verify.passed},
        "train": _plain(train_cfg),
        "models": models,
        "comparison": rows,
    }
    started = _stamp()
    _write_json(out / "report.json", report)
    (out / "comparison.md").write_text(comparison_table(rows))
    write_run_manifest(out, "pipeline", {"magnitudes": magnitudes, "epochs": train_cfg.epochs,
                                         "mode": mode}, [], seed, started)
    return report


def cmd_pipeline(args) -> int:
    spec = _load_spec(args.spec, args.seed)
    mags = {"scene": abs(args.lam), "object": abs(args.gamma)}
    report = run_pipeline(spec, args.out, mags, args.epochs, args.mode)
    _emit(args, report, comparison_table(report["comparison"]))
    return 0


# ---------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="print a JSON result on stdout")
    common.add_argument("--seed", type=int, default=None, help="seed override")
    common.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")

    p = argparse.ArgumentParser(prog="nca-amt", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", metavar="command")

    s = sub.add_parser("ingest", parents=[common], help="validate and normalize a manifest")
    s.add_argument("--input", required=True)
    s.add_argument("--format", choices=("jsonl", "csv"), default=None)
    s.add_argument("--min-class-size", type=int, default=0)
    s.add_argument("--out", default=None, help="output directory")
    s.add_argument("--out-format", choices=("jsonl", "csv"), default="jsonl")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("nca", parents=[common], help="necessity analysis and sign recommendation")
    s.add_argument("--manifest", required=True)
    s.add_argument("--families", type=_families, default=["scene", "object"])
    s.add_argument("--thresholds", type=_thresholds, default=None, help="start:stop:num or list")
    s.add_argument("--mode", choices=nca.MODES, default="any")
    s.add_argument("--cutoff", type=float, default=nca.DEFAULT_CUTOFF)
    s.add_argument("--out", default=None, help="output directory")
    s.set_defaults(func=cmd_nca)

    s = sub.add_parser("split", parents=[common], help="scene-invariant train/val split")
    s.add_argument("--manifest", required=True)
    s.add_argument("--variant", type=int, choices=(1, 2), required=True)
    s.add_argument("--min-class-size", type=int, default=124)
    s.add_argument("--val-fraction", type=float, default=0.06)
    s.add_argument("--family", default="scene")
    s.add_argument("--no-repair", action="store_true", help="skip train class-coverage repair")
    s.add_argument("--tie-break", choices=("canonical", "random"), default="canonical")
    s.add_argument("--out", default=None, help="output directory")
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("synth", parents=[common], help="generate the synthetic benchmark")
    s.add_argument("--spec", default="default", help="'default' or a spec JSON file")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", parents=[common], help="train a model")
    s.add_argument("--config", required=True)
    s.add_argument("--train", required=True)
    s.add_argument("--val", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--features", required=True)
    s.add_argument("--probe", default=None, help="ids for the per-epoch probe (default: val)")
    s.add_argument("--signs", default=None, help="nca.json whose signs set the head weights")
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    s.add_argument("--model", required=True, help="checkpoint stem or training output directory")
    s.add_argument("--manifest", required=True)
    s.add_argument("--features", required=True)
    s.add_argument("--ids", default=None)
    s.add_argument("--reference", default=None, help="ids whose labels define representatives")
    s.add_argument("--family", default="scene")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("dcorr", parents=[common], help="squared distance correlation")
    s.add_argument("--features", required=True)
    s.add_argument("--labels", required=True)
    s.set_defaults(func=cmd_dcorr)

    s = sub.add_parser("pipeline", parents=[common], help="synth, nca, split, train, eval")
    s.add_argument("--spec", default="default")
    s.add_argument("--out", default="pipeline_out")
    s.add_argument("--lambda", dest="lam", type=float, default=0.5, help="scene weight magnitude")
    s.add_argument("--gamma", type=float, default=0.5, help="object weight magnitude")
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--mode", choices=amtnet.MODES, default="grad-reversal")
    s.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    logging.captureWarnings(True)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            return args.func(args)
    except ValidationFailure as exc:
        log.error("%s", exc)
        return 1
    except (ValueError, KeyError, OSError, amtnet.TrainingDiverged) as exc:
        # ManifestError and SpecError are ValueErrors
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
