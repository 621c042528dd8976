"""``amx`` command line: train, maximize, evaluate and embed from one JSON config."""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .actmax import ModelBundle, class_to_class_batch, energy_concentration, noise_protocol, write_result
from .config import SEED_NAMES, DatasetConfig, RunConfig, Seeds, SyntheticSpec, config_from_dict, load_config
from .data import DatasetSplit, write_report
from .errors import AmxError, ConfigError
from .evaluate import latent_shift_report, summarize_mode
from .features import features_from_file, write_grid_csv
from .models import ClassifierModel, load_checkpoint, save_checkpoint
from .svg import embedding_svg, transfer_grid_svg
from .train import evaluate_accuracy, train_autoencoder, train_classifier

log = logging.getLogger("amx")

SUBCOMMANDS = ("features", "train-classifier", "train-autoencoder", "maximize", "evaluate-transfer", "embed",
               "report")
CHECKPOINTS = {"original": "classifier.amxc", "separate": "separate.amxc", "autoencoder": "autoencoder.amxc"}


class Run:
    """Per-invocation state: resolved config, output directory and the artifact list for the manifest."""

    def __init__(self, cfg: RunConfig, command: str, argv: Sequence[str], threads: int | None):
        self.cfg = cfg
        self.command = command
        self.argv = list(argv)
        self.threads = threads
        self.out = cfg.out
        self.artifacts: list[str] = []
        self._split: DatasetSplit | None = None
        try:
            self.out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"cannot create output directory {self.out}: {exc}") from exc

    def path(self, *parts: str) -> Path:
        p = self.out.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        rel = p.relative_to(self.out).as_posix()
        if rel not in self.artifacts:
            self.artifacts.append(rel)
        return p

    def split(self) -> DatasetSplit:
        if self._split is None:
            self._split = self.cfg.dataset.load()
            write_report(self._split, self.path("split_report.json"))
        return self._split

    def load(self, role: str):
        p = self.out / CHECKPOINTS[role]
        if not p.is_file():
            raise FileNotFoundError(f"checkpoint not found: {p} (run the matching train-* subcommand first)")
        return load_checkpoint(p)

    def bundle(self, need_ae: bool, need_separate: bool) -> ModelBundle:
        return ModelBundle(self.load("original"), self.load("autoencoder") if need_ae else None,
                           self.load("separate") if need_separate else None)

    def write_manifest(self, status: str) -> Path:
        p = self.out / f"manifest_{self.command}.json"
        record = {
            "command": self.command,
            "argv": self.argv,
            "version": __version__,
            "status": status,
            "config_hash": self.cfg.config_hash(),
            "config": self.cfg.to_dict(),
            "seeds": {k: getattr(self.cfg.seeds, k) for k in SEED_NAMES},
            "threads": self.threads,
            "artifacts": sorted(self.artifacts),
            "created_utc": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        }
        p.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
        return p


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_features(run: Run, args) -> None:
    if not args.inputs:
        raise ConfigError("features: give at least one WAV file or directory")
    files: list[Path] = []
    for item in args.inputs:
        p = Path(item)
        files.extend(sorted(p.rglob("*.wav")) if p.is_dir() else [p])
    for f in files:
        grid = features_from_file(f)
        write_grid_csv(run.path("features", f"{f.parent.name}__{f.stem}.csv"), grid)
    log.info("wrote %d feature grids", len(files))


def _train_one(run: Run, role: str) -> ClassifierModel:
    split = run.split()
    seed = run.cfg.seeds.classifier if role == "original" else run.cfg.seeds.separate
    tc = run.cfg.train.__class__(**{**run.cfg.train.__dict__, "seed": seed})
    model, history = train_classifier(split, tc)
    stem = "classifier" if role == "original" else "separate"
    save_checkpoint(model, run.path(CHECKPOINTS[role]))
    history.write_csv(run.path(f"{stem}_history.csv"))
    metrics = {"role": role, "seed": seed, "best_epoch": history.best_epoch,
               "initial_train_loss": history.initial_train_loss,
               "val_accuracy": history.val_acc[history.best_epoch - 1],
               "test_accuracy": evaluate_accuracy(model, split.test) if split.test else None}
    run.path(f"{stem}_metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    log.info("%s classifier: %s", role, metrics)
    return model


def cmd_train_classifier(run: Run, args) -> None:
    roles = ["original", "separate"] if args.role == "both" else [args.role]
    for role in roles:
        _train_one(run, role)


def cmd_train_autoencoder(run: Run, args) -> None:
    split = run.split()
    tc = run.cfg.autoencoder_train.__class__(**{**run.cfg.autoencoder_train.__dict__,
                                                "seed": run.cfg.seeds.autoencoder})
    model, history = train_autoencoder(split, tc, run.cfg.latent_dim)
    save_checkpoint(model, run.path(CHECKPOINTS["autoencoder"]))
    history.write_csv(run.path("autoencoder_history.csv"))
    metrics = {"seed": tc.seed, "best_epoch": history.best_epoch, "initial_train_loss": history.initial_train_loss,
               "val_mse": history.val_loss[history.best_epoch - 1]}
    run.path("autoencoder_metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    log.info("autoencoder: %s", metrics)


def _class_names(models: ModelBundle) -> list[str]:
    k = models.classifier.num_classes
    return list(models.classifier.class_names or [str(c) for c in range(k)])


def _maximize_modes(run: Run, need_separate: bool) -> tuple[ModelBundle, dict]:
    cfg = run.cfg
    modes = cfg.eval.modes
    models = run.bundle("latent" in modes, need_separate)
    names = _class_names(models)
    out = {}
    for mode in modes:
        results = noise_protocol(mode, models, cfg.eval.per_class, cfg.seeds.maximization, cfg.maximize)
        out[mode] = results
        with open(run.path("maximize", mode, "runs.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["target", "index", "iterations_used", "reached_stop", "final_prob", "energy_top1"])
            for c in sorted(results):
                for i, r in enumerate(results[c]):
                    w.writerow([names[c], i, r.iterations_used, int(r.reached_stop), repr(r.final_prob),
                                repr(energy_concentration(r.additive_noise))])
        for c in sorted(results):
            for i, r in enumerate(results[c][:cfg.eval.samples_per_class]):
                stem = f"{names[c]}_{i:04d}"
                j, g = write_result(r, run.out / "maximize" / mode, stem, cfg.maximize)
                for p in (j, g):
                    run.path(p.relative_to(run.out).as_posix())
    return models, out


def cmd_maximize(run: Run, args) -> None:
    cfg = run.cfg
    if args.protocol == "class-to-class":
        models = run.bundle("latent" in cfg.eval.modes, False)
        names = _class_names(models)
        examples = run.split().test[:cfg.eval.embed_examples]
        for mode in cfg.eval.modes:
            results = class_to_class_batch(mode, models, examples, cfg.maximize)
            with open(run.path("maximize", f"{mode}_class_to_class.csv"), "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["index", "target", "speaker", "iterations_used", "reached_stop", "start_logit",
                            "final_logit", "final_prob"])
                for i, r in enumerate(results):
                    w.writerow([i, names[r.target], r.meta.get("speaker_id", ""), r.iterations_used,
                                int(r.reached_stop), repr(r.trajectory[0]), repr(r.trajectory[-1]),
                                repr(r.final_prob)])
        return
    _maximize_modes(run, need_separate=False)


def cmd_evaluate_transfer(run: Run, args) -> None:
    models, per_mode = _maximize_modes(run, need_separate=True)
    names = _class_names(models)
    summary = {}
    for mode, results in per_mode.items():
        stats, grid = summarize_mode(models, results, names)
        grid.write_csv(run.path(f"transfer_{mode}.csv"))
        run.path(f"transfer_{mode}.svg").write_text(
            transfer_grid_svg(grid, f"{mode}: separate-classifier decisions per target"))
        summary[mode] = stats.as_dict()
    if {"direct", "latent"} <= set(summary):
        d, l = summary["direct"], summary["latent"]
        summary["comparison"] = {
            "transfer_ratio_latent_over_direct": (l["transfer_rate"] / d["transfer_rate"]
                                                  if d["transfer_rate"] > 0 else None),
            "latent_diagonal_exceeds_direct": l["mean_diagonal"] > d["mean_diagonal"],
            "direct_energy_exceeds_latent": d["mean_energy_top1"] > l["mean_energy_top1"],
        }
    run.path("transfer_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    log.info("transfer summary: %s", json.dumps(summary, sort_keys=True))


def cmd_embed(run: Run, args) -> None:
    cfg = run.cfg
    models = run.bundle(True, False)
    examples = run.split().test[:cfg.eval.embed_examples]
    report = latent_shift_report(models, examples, cfg.maximize, cfg.eval.perplexity, cfg.eval.tsne_iters,
                                 cfg.seeds.maximization, _class_names(models))
    report.write_embedding_csv(run.path("embedding.csv"))
    report.write_shift_csv(run.path("latent_shift.csv"))
    run.path("embedding.svg").write_text(embedding_svg(report.points, title="latent codes before/after"))
    np.savetxt(run.path("tsne_kl.csv"), report.tsne.kl_history, fmt="%.17g")
    summary = {"examples": len(report.rows),
               "misclassified": sum(r.misclassified for r in report.rows),
               "mean_displacement_misclassified": report.mean_displacement(True),
               "mean_displacement_correct": report.mean_displacement(False)}
    run.path("latent_shift_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    log.info("latent shift: %s", summary)


def cmd_report(run: Run, args) -> None:
    cmd_evaluate_transfer(run, args)
    if "latent" in run.cfg.eval.modes:
        cmd_embed(run, args)


HANDLERS = {
    "features": cmd_features,
    "train-classifier": cmd_train_classifier,
    "train-autoencoder": cmd_train_autoencoder,
    "maximize": cmd_maximize,
    "evaluate-transfer": cmd_evaluate_transfer,
    "embed": cmd_embed,
    "report": cmd_report,
}


# --------------------------------------------------------------------------
# argument handling
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--out", help="output directory (overrides config.output_dir)")
    common.add_argument("--threads", type=int, help="cap BLAS worker threads (fallback: AMX_THREADS)")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    common.add_argument("--data-root", help="corpus root (replaces the dataset source)")
    common.add_argument("--max-per-class", type=int)
    common.add_argument("--epochs", type=int, help="classifier and autoencoder epochs")
    common.add_argument("--batch-size", type=int)
    common.add_argument("--learning-rate", type=float, help="Adam learning rate")
    common.add_argument("--alpha", type=float, help="maximization step size")
    common.add_argument("--max-iters", type=int)
    common.add_argument("--per-class", type=int, help="noise starts per class")
    common.add_argument("--modes", help="comma list of direct,latent")
    common.add_argument("--embed-examples", type=int)
    common.add_argument("--tsne-iters", type=int)

    parser = argparse.ArgumentParser(prog="amx", description=__doc__)
    parser.add_argument("--version", action="version", version=f"amx {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND")
    sub.required = True
    p = sub.add_parser("features", parents=[common], help="log-mel grids for WAV files")
    p.add_argument("inputs", nargs="*")
    p = sub.add_parser("train-classifier", parents=[common], help="train the original and/or separate classifier")
    p.add_argument("--role", choices=["original", "separate", "both"], default="original")
    sub.add_parser("train-autoencoder", parents=[common], help="train the autoencoder prior")
    p = sub.add_parser("maximize", parents=[common], help="run a maximization protocol")
    p.add_argument("--protocol", choices=["noise-to-class", "class-to-class"], default="noise-to-class")
    sub.add_parser("evaluate-transfer", parents=[common], help="transfer grids against the separate classifier")
    sub.add_parser("embed", parents=[common], help="latent-shift t-SNE diagnostics")
    sub.add_parser("report", parents=[common], help="evaluate-transfer followed by embed")
    return parser


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    d = cfg.to_dict()
    if args.out:
        d["output_dir"] = args.out
    if args.data_root:
        d["dataset"]["root"], d["dataset"]["synthetic"] = args.data_root, None
    if args.max_per_class is not None:
        d["dataset"]["max_per_class"] = args.max_per_class
    for key, dest in (("epochs", "epochs"), ("batch_size", "batch_size"), ("learning_rate", "learning_rate")):
        value = getattr(args, key)
        if value is not None:
            d["train"][dest] = value
            d["autoencoder_train"][dest] = value
    if args.alpha is not None:
        d["maximize"]["learning_rate"] = args.alpha
    if args.max_iters is not None:
        d["maximize"]["max_iters"] = args.max_iters
    if args.per_class is not None:
        d["eval"]["per_class"] = args.per_class
    if args.modes:
        d["eval"]["modes"] = [m.strip() for m in args.modes.split(",") if m.strip()]
    if args.embed_examples is not None:
        d["eval"]["embed_examples"] = args.embed_examples
    if args.tsne_iters is not None:
        d["eval"]["tsne_iters"] = args.tsne_iters
    return config_from_dict(d)


def _resolve_threads(value: int | None) -> int | None:
    if value is None and os.environ.get("AMX_THREADS"):
        try:
            value = int(os.environ["AMX_THREADS"])
        except ValueError as exc:
            raise ConfigError(f"AMX_THREADS must be an integer, got {os.environ['AMX_THREADS']!r}") from exc
    if value is not None and value < 1:
        raise ConfigError(f"thread count must be >= 1, got {value}")
    return value


def _thread_limit(n: int | None):
    if n is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        threads = _resolve_threads(args.threads)
        if not args.config:
            if args.command != "features" or not args.out:
                raise ConfigError(f"{args.command}: --config is required"
                                  + (" (or --out for features)" if args.command == "features" else ""))
            cfg = RunConfig(DatasetConfig(synthetic=SyntheticSpec()), Seeds(0, 0, 0, 0), args.out)
        else:
            cfg = _apply_overrides(load_config(args.config), args)
        run = Run(cfg, args.command, argv, threads)
    except ConfigError as exc:
        print(f"amx: configuration error: {exc}", file=sys.stderr)
        return 2
    try:
        with _thread_limit(threads):
            HANDLERS[args.command](run, args)
    except ConfigError as exc:
        print(f"amx: configuration error: {exc}", file=sys.stderr)
        run.write_manifest("config-error")
        return 2
    except (AmxError, OSError, ValueError) as exc:
        print(f"amx: error: {exc}", file=sys.stderr)
        run.write_manifest("failed")
        return 1
    run.write_manifest("ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
