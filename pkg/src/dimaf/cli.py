"""Command-line entry point: ``dimaf {generate,validate,crossval,explain,report}``.

Every invocation appends one JSON line to ``<out>/manifests.jsonl`` recording
the command, configuration echo, seed, code version, input hashes, outputs and
wall-clock time. Exit codes: 0 success, 1 validation error, 2 runtime or
numerical failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, build, read_kv, split_known
from .datagen import GeneratorConfig, generate_cohort, read_cohort, validate_cohort_dir, write_cohort
from .diffgraph import NonFiniteError
from .explain import ReportSchemaError as ExplainSchemaError
from .explain import normalized_report, read_explain_report, write_explain_report
from .model import BLOCKS, CheckpointError, load_checkpoint
from .prototype import EmConfig, EmNumericalError
from .train_eval import (
    REPORT_SCHEMA as CROSSVAL_SCHEMA,
    ReportSchemaError as CrossvalSchemaError,
    FoldPreprocessing,
    TrainConfig,
    TrainingError,
    build_inputs,
    cohort_signature,
    crossval,
    read_report,
)
from .explain import REPORT_SCHEMA as EXPLAIN_SCHEMA

log = logging.getLogger("dimaf")

OUT_ENV = "DIMAF_OUT"
DEFAULT_OUT = "dimaf_out"
EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2

VALIDATION_ERRORS = (ConfigError, CheckpointError, CrossvalSchemaError, ExplainSchemaError,
                     FileNotFoundError, ValueError)
RUNTIME_ERRORS = (TrainingError, EmNumericalError, NonFiniteError, FloatingPointError,
                  np.linalg.LinAlgError, ArithmeticError)

COHORT_FILES = ("generator.cfg", "expression.csv", "survival.csv", "pathways.gmt", "planted.csv",
                "planted_weights.npz")


class CommandError(ValueError):
    pass


# ---------------------------------------------------------------- hashing and manifests


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def cohort_dir_sha256(cohort_dir) -> str:
    """Hash of the cohort files (names and contents), ignoring anything else in the directory."""
    root = Path(cohort_dir)
    paths = [root / name for name in COHORT_FILES if (root / name).exists()]
    if (root / "patches").is_dir():
        paths += sorted((root / "patches").glob("*.csv"))
    h = hashlib.sha256()
    for p in paths:
        h.update(p.relative_to(root).as_posix().encode())
        h.update(file_sha256(p).encode())
    return h.hexdigest()


def append_manifest(out_dir: Path, record: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "manifests.jsonl", "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


# ---------------------------------------------------------------- config helpers


def _load_config(path) -> dict[str, str]:
    if path is None:
        return {}
    if not Path(path).exists():
        raise ConfigError(f"config file {path} does not exist")
    return read_kv(path)


def train_config_from_args(args) -> TrainConfig:
    (values,) = split_known(_load_config(args.config), TrainConfig)
    cfg = build(TrainConfig, values)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.folds is not None:
        overrides["folds"] = args.folds
    if args.lambda_dis is not None:
        overrides["lambda_dis"] = args.lambda_dis
    if args.lambda_surv is not None:
        overrides["lambda_surv"] = args.lambda_surv
    cfg = dataclasses.replace(cfg, **overrides)
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def generator_config_from_args(args) -> GeneratorConfig:
    cfg = build(GeneratorConfig, _load_config(args.config))
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------- commands


def cmd_generate(args, record: dict) -> int:
    cfg = generator_config_from_args(args)
    record["config"] = dataclasses.asdict(cfg)
    record["seed"] = cfg.seed
    if args.config:
        record["inputs"][str(args.config)] = file_sha256(args.config)
    cohort = generate_cohort(cfg)
    write_cohort(cohort, args.out)
    record["outputs"] = [name for name in COHORT_FILES if (Path(args.out) / name).exists()] + ["patches/"]
    print(f"wrote {len(cohort)} patients to {args.out}")
    return EXIT_OK


def cmd_validate(args, record: dict) -> int:
    record["inputs"][str(args.cohort)] = cohort_dir_sha256(args.cohort)
    problems = validate_cohort_dir(args.cohort)
    record["problems"] = problems
    if problems:
        for p in problems:
            print(f"invalid: {p}", file=sys.stderr)
        return EXIT_VALIDATION
    print(f"{args.cohort}: valid")
    return EXIT_OK


def cmd_crossval(args, record: dict) -> int:
    cfg = train_config_from_args(args)
    record["config"] = dataclasses.asdict(cfg)
    record["seed"] = cfg.seed
    if args.config:
        record["inputs"][str(args.config)] = file_sha256(args.config)
    record["inputs"][str(args.cohort)] = cohort_dir_sha256(args.cohort)
    problems = validate_cohort_dir(args.cohort)
    if problems:
        raise CommandError("invalid cohort: " + "; ".join(problems))
    cohort = read_cohort(args.cohort)
    report = crossval(cfg, cohort, cfg.folds, out_dir=args.out, threads=args.threads)
    record["outputs"] = ["crossval_report.json", "crossval_report.csv",
                         *(f["checkpoint"] for f in report["folds"])]
    s = report["summary"]
    print(f"{report['variant']}: c-index {s['c_index']['mean']:.4f} +/- {s['c_index']['std']:.4f}, "
          f"total DC {s['dc_total']['mean']:.4f} +/- {s['dc_total']['std']:.4f}")
    return EXIT_OK


def _expand_checkpoints(paths) -> list[Path]:
    out = []
    for p in map(Path, paths):
        if p.is_dir():
            found = sorted((p / "checkpoints").glob("fold_*.npz")) or sorted(p.glob("fold_*.npz"))
            if not found:
                raise CommandError(f"no fold checkpoints under {p}")
            out.extend(found)
        else:
            out.append(p)
    return out


def cmd_explain(args, record: dict) -> int:
    record["inputs"][str(args.cohort)] = cohort_dir_sha256(args.cohort)
    cohort = read_cohort(args.cohort)
    signature = cohort_signature(cohort)
    reports, sources, variants = [], [], set()
    for path in _expand_checkpoints(args.checkpoint):
        record["inputs"][str(path)] = file_sha256(path)
        model, extras, meta = load_checkpoint(path)
        if meta.get("cohort_signature") != signature:
            raise CheckpointError(f"{path} was trained on a different gene/pathway/patch layout "
                                  "than the given cohort")
        tcfg = meta.get("train_config", {})
        em = EmConfig(max_iter=tcfg.get("em_max_iter", 10), tol=tcfg.get("em_tol", 1e-6),
                      var_floor=tcfg.get("var_floor", 1e-4))
        prep = FoldPreprocessing.from_extras(extras)
        idx = extras["test_index"]
        inputs = build_inputs(cohort.subset(idx), prep, em)
        if args.baseline == "zero":
            baseline = {b: np.zeros(model.cfg.d_z) for b in BLOCKS}
        else:
            baseline = {b: extras[f"baseline_{b}"] for b in BLOCKS}
        reports.append(normalized_report(model, inputs, baseline))
        sources.append(path.as_posix())
        variants.add(meta.get("variant", "unknown"))
    if len(variants) != 1:
        raise CommandError(f"checkpoints mix model variants {sorted(variants)}")
    jpath, cpath = write_explain_report(args.out, reports, sources, variants.pop(), args.baseline)
    record["outputs"] = [jpath.name, cpath.name]
    shared = np.mean([r.shared for r in reports])
    print(f"Specific {1 - shared:.4f}  Shared {shared:.4f}  ({len(reports)} checkpoint(s))")
    return EXIT_OK


# ---------------------------------------------------------------- report rendering


def _pm(stat: dict | None, digits: int = 4) -> str:
    if stat is None or stat.get("mean") is None:
        return "n/a"
    return f"{stat['mean']:.{digits}f} ± {stat['std']:.{digits}f}"


def _table(header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in [header, *rows]) for i in range(len(header))]
    fmt = lambda r: "  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()  # noqa: E731
    return "\n".join([fmt(header), fmt(["-" * w for w in widths]), *map(fmt, rows)])


def load_any_report(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CommandError(f"{path}: not JSON ({exc})") from None
    schema = doc.get("schema") if isinstance(doc, dict) else None
    if schema == CROSSVAL_SCHEMA:
        return read_report(path)
    if schema == EXPLAIN_SCHEMA:
        return read_explain_report(path)
    raise CommandError(f"{path}: unknown report schema {schema!r}")


def render_reports(docs: list[dict]) -> str:
    """Text tables: discrimination, disentanglement and attribution shares (mean ± std over folds)."""
    cv = [d for d in docs if d["schema"] == CROSSVAL_SCHEMA]
    ex = [d for d in docs if d["schema"] == EXPLAIN_SCHEMA]
    parts = []
    if cv:
        k = len(cv[0]["folds"])
        rows = []
        clinical = next((d["summary"]["clinical_c_index"] for d in cv
                         if d["summary"]["clinical_c_index"]["mean"] is not None), None)
        if clinical is not None:
            rows.append(["Clinical", _pm(clinical)])
        rows += [[d["variant"], _pm(d["summary"]["c_index"])] for d in cv]
        parts.append(f"Test c-index (mean ± std over {k} folds)\n" + _table(["model", "c-index"], rows))
        rows = [[d["variant"], _pm(d["summary"]["d1"]), _pm(d["summary"]["d2"]),
                 _pm(d["summary"]["dc_total"])] for d in cv]
        parts.append("Test distance correlation (lower is more disentangled)\n"
                     + _table(["model", "D1", "D2", "total"], rows))
    if ex:
        names = (("specific", "Specific"), ("shared", "Shared"), ("hh", "Z_hh"), ("gg", "Z_gg"),
                 ("gh", "Z_gh"), ("hg", "Z_hg"))
        rows = [[label, *(_pm(d["summary"][key]) for d in ex)] for key, label in names]
        parts.append(f"Normalized attribution shares ({ex[0]['metadata']['normalization']})\n"
                     + _table(["representation", *(d["variant"] for d in ex)], rows))
    return "\n\n".join(parts) + "\n"


def _epoch_curves(doc: dict, key: str) -> np.ndarray:
    return np.array([[h[key] for h in f["history"]] for f in doc["folds"]], dtype=np.float64)


def plot_reports(docs: list[dict], out_dir: Path) -> list[Path]:
    """Loss curves and per-epoch training DC, averaged over folds, one line per variant."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cv = [d for d in docs if d["schema"] == CROSSVAL_SCHEMA and d["folds"] and d["folds"][0]["history"]]
    if not cv:
        return []
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    panels = (("loss_curves.png", (("loss", "total loss"), ("surv", "Cox loss"))),
              ("dc_over_epochs.png", (("d1", "D1"), ("d2", "D2"), ("dis", "D1 + D2"))))
    for fname, keys in panels:
        fig, axes = plt.subplots(1, len(keys), figsize=(4 * len(keys), 3.2), squeeze=False)
        for ax, (key, title) in zip(axes[0], keys):
            for d in cv:
                curve = _epoch_curves(d, key).mean(axis=0)
                ax.plot(np.arange(1, curve.size + 1), curve, label=d["variant"])
            ax.set_title(title)
            ax.set_xlabel("epoch")
            ax.legend(fontsize=8)
        fig.tight_layout()
        path = out_dir / fname
        fig.savefig(path, dpi=100, metadata={"Software": None})
        plt.close(fig)
        written.append(path)
    return written


def cmd_report(args, record: dict) -> int:
    docs = []
    for path in args.reports:
        record["inputs"][str(path)] = file_sha256(path)
        docs.append(load_any_report(path))
    text = render_reports(docs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(text, encoding="utf-8")
    plots = [] if args.no_plots else plot_reports(docs, out / "plots")
    record["outputs"] = ["report.txt", *(p.relative_to(out).as_posix() for p in plots)]
    sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _add_out(p):
    p.add_argument("--out", default=os.environ.get(OUT_ENV, DEFAULT_OUT),
                   help=f"output directory (default: ${OUT_ENV} or ./{DEFAULT_OUT})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dimaf", description="Disentangled multimodal survival pipeline on synthetic cohorts.",
        epilog="Exit codes: 0 success, 1 validation error, 2 runtime or numerical failure.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("generate", help="write a synthetic planted-signal cohort")
    p.add_argument("--config", help="generator key = value file")
    p.add_argument("--seed", type=int, help="override the generator seed")
    _add_out(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("validate", help="schema-check a cohort directory")
    p.add_argument("cohort", help="cohort directory")
    _add_out(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("crossval", help="k-fold cross-validation with checkpoints and reports")
    p.add_argument("cohort", help="cohort directory")
    p.add_argument("--config", help="training key = value file (TrainConfig fields)")
    p.add_argument("--seed", type=int, help="override the training seed")
    p.add_argument("--folds", type=int, help="number of folds k (>= 2)")
    p.add_argument("--lambda-dis", type=float, help="disentanglement weight; 0 gives the no-disentanglement ablation")
    p.add_argument("--lambda-surv", type=float, help="survival loss weight")
    p.add_argument("--threads", type=int, default=1, help="parallel fold workers; 1 guarantees bitwise determinism")
    _add_out(p)
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("explain", help="block-level Shapley shares from fold checkpoints")
    p.add_argument("cohort", help="cohort directory the checkpoints were trained on")
    p.add_argument("--checkpoint", nargs="+", required=True,
                   help="checkpoint files, or crossval output directories holding checkpoints/")
    p.add_argument("--baseline", choices=("train_mean", "zero"), default="train_mean",
                   help="reference representation for absent blocks")
    _add_out(p)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("report", help="render report files as text tables and plots")
    p.add_argument("reports", nargs="+", help="crossval_report.json and/or explain_report.json files")
    p.add_argument("--no-plots", action="store_true", help="skip plot files")
    _add_out(p)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    record = {"command": args.command, "argv": argv, "code_version": __version__, "config": None,
              "seed": getattr(args, "seed", None), "inputs": {}, "outputs": [], "out_dir": out.as_posix()}
    start = time.perf_counter()
    try:
        code = args.func(args, record)
    except RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        record["error"] = str(exc)
        code = EXIT_RUNTIME
    except (VALIDATION_ERRORS + (CommandError, OSError)) as exc:
        print(f"error: {exc}", file=sys.stderr)
        record["error"] = str(exc)
        code = EXIT_VALIDATION
    record["exit_code"] = code
    record["wall_seconds"] = round(time.perf_counter() - start, 6)
    append_manifest(out, record)
    return code


if __name__ == "__main__":
    sys.exit(main())
