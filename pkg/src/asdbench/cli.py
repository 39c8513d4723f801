"""Command-line surface: synth -> train -> score -> eval.

Exit codes: 0 ok, 1 usage, 2 output exists/refused, 3 missing artifact,
4 validation failure. Every error path prints a single line to stderr with
a machine-parsable "E<code>:" prefix. The seed falls back to the
ASDBENCH_SEED environment variable, then 0; an optional JSON config file
supplies defaults that flags override.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import corpus, detectors, metrics
from .corpus import OutputTreeError, scan_dataset, synth_corpus
from .detectors import (
    DETECTOR_KINDS,
    InsufficientSectionsError,
    TrainOptions,
    fit_detector,
    load_detector,
    save_detector,
    score_dataset,
)
from .metrics import ScoreRecord, ScoreValidationError, UndefinedMetricError, evaluate

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_EXISTS = 2
EXIT_MISSING = 3
EXIT_INVALID = 4

SEED_ENV_VAR = "ASDBENCH_SEED"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); keep our code mapping
        raise UsageError(message)


def _score_file_name(machine: str, section: int, domain: str) -> str:
    return f"anomaly_score_{machine}_section_{section:02d}_{domain}.csv"


def build_parser() -> _Parser:
    parser = _Parser(prog="asdbench", description=__doc__.splitlines()[0])
    parser.add_argument("--config", type=Path, help="JSON file with default option values")
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic domain-shifted corpus")
    p_synth.add_argument("--out", type=Path, required=True)
    p_synth.add_argument("--machines", type=int)
    p_synth.add_argument("--sections", type=int)
    p_synth.add_argument("--source-train", type=int)
    p_synth.add_argument("--target-train-clips", type=int)
    p_synth.add_argument("--test-normal", type=int)
    p_synth.add_argument("--test-anomaly", type=int)
    p_synth.add_argument("--shift-f0-ratio", type=float)
    p_synth.add_argument("--shift-snr-db", type=float)
    p_synth.add_argument("--seed", type=int)
    p_synth.add_argument("--force", action="store_true", default=None)

    p_train = sub.add_parser("train", help="fit one detector per machine type")
    p_train.add_argument("--data", type=Path, required=True)
    p_train.add_argument("--out", type=Path, required=True)
    p_train.add_argument("--detector", choices=DETECTOR_KINDS, required=True)
    p_train.add_argument("--members", help="comma-separated ensemble members (e.g. oe,gmm)")
    p_train.add_argument("--machine", help="restrict to one machine type")
    p_train.add_argument("--seed", type=int)
    p_train.add_argument(
        "--no-adapt", action="store_true", default=None, help="skip per-domain adaptation"
    )
    p_train.add_argument(
        "--pool-target", action="store_true", default=None,
        help="pool target-domain training clips into single-model detectors",
    )
    p_train.add_argument("--knn-k", type=int)
    p_train.add_argument("--gmm-components", type=int)
    p_train.add_argument("--serial-im", choices=("gmm", "knn"))
    p_train.add_argument("--ae-epochs", type=int)
    p_train.add_argument("--oe-epochs", type=int)

    p_score = sub.add_parser("score", help="score test clips with trained detectors")
    p_score.add_argument("--data", type=Path, required=True)
    p_score.add_argument("--models", type=Path, required=True)
    p_score.add_argument("--out", type=Path, required=True)
    p_score.add_argument("--machine")

    p_eval = sub.add_parser("eval", help="evaluate score files against a labeled corpus")
    p_eval.add_argument("--data", type=Path, required=True)
    p_eval.add_argument("--scores", type=Path)
    p_eval.add_argument("--out", type=Path)
    p_eval.add_argument("--p", type=float)
    p_eval.add_argument("--trials", type=int, help="rerun train+score+eval over several seeds")
    p_eval.add_argument("--detector", choices=DETECTOR_KINDS, help="detector for --trials")
    p_eval.add_argument("--members")
    p_eval.add_argument("--machine")
    p_eval.add_argument("--seed", type=int)
    p_eval.add_argument("--no-adapt", action="store_true", default=None)
    p_eval.add_argument("--pool-target", action="store_true", default=None)
    p_eval.add_argument("--knn-k", type=int)
    p_eval.add_argument("--gmm-components", type=int)
    p_eval.add_argument("--serial-im", choices=("gmm", "knn"))
    p_eval.add_argument("--ae-epochs", type=int)
    p_eval.add_argument("--oe-epochs", type=int)
    return parser


_DEFAULTS = {
    "machines": 1,
    "sections": 1,
    "source_train": 1000,
    "target_train_clips": 3,
    "test_normal": 50,
    "test_anomaly": 50,
    "shift_f0_ratio": 0.5,
    "shift_snr_db": -5.0,
    "p": metrics.DEFAULT_PAUC_P,
    "knn_k": 1,
    "gmm_components": 8,
    "serial_im": "gmm",
    "members": "oe,gmm",
    "force": False,
    "no_adapt": False,
    "pool_target": False,
}


def _resolve(args: argparse.Namespace, config: dict):
    """Fill unset options from the config file, then from built-in defaults."""
    for key, value in vars(args).items():
        if value is None and key in config:
            setattr(args, key, config[key])
    for key, default in _DEFAULTS.items():
        if getattr(args, key, None) is None and hasattr(args, key):
            setattr(args, key, default)
    if getattr(args, "seed", None) is None and hasattr(args, "seed"):
        env = os.environ.get(SEED_ENV_VAR)
        args.seed = int(env) if env else config.get("seed", 0)


def _train_options(args) -> TrainOptions:
    return TrainOptions(
        seed=args.seed,
        adapt=not args.no_adapt,
        pool_target=args.pool_target,
        members=tuple(m.strip() for m in args.members.split(",") if m.strip()),
        knn_k=args.knn_k,
        gmm_components=args.gmm_components,
        serial_im=args.serial_im,
        ae_epochs=args.ae_epochs,
        oe_epochs=args.oe_epochs,
    )


def _select_machines(index, machine_filter):
    if machine_filter is None:
        return index.machines
    if machine_filter not in index.machines:
        raise ScoreValidationError(
            f"machine {machine_filter!r} not in corpus (has {index.machines})", []
        )
    return [machine_filter]


def cmd_synth(args) -> int:
    def shifted(spec):
        return corpus.DomainSpec(
            fundamental_hz=spec.fundamental_hz * args.shift_f0_ratio,
            harmonic_count=spec.harmonic_count,
            snr_db=spec.snr_db + args.shift_snr_db,
            noise_color=spec.noise_color,
        )

    index = synth_corpus(
        args.out,
        machines=args.machines,
        sections_per_machine=args.sections,
        source_train=args.source_train,
        target_train=args.target_train_clips,
        test_normal=args.test_normal,
        test_anomaly=args.test_anomaly,
        seed=args.seed,
        domain_shift=shifted,
        force=args.force,
    )
    print(f"wrote {len(index.entries)} clips under {index.root}")
    for key, count in sorted(index.counts().items()):
        machine, section, domain, split = key
        print(f"  {machine} section {section:02d} {domain:6s} {split:5s}: {count}")
    print(f"manifest: {index.root / corpus.MANIFEST_NAME}")
    return EXIT_OK


def cmd_train(args) -> int:
    index = scan_dataset(args.data)
    options = _train_options(args)
    out = Path(args.out)
    for machine in _select_machines(index, args.machine):
        detector = fit_detector(args.detector, index, machine, options)
        target_dir = save_detector(detector, out / machine)
        curve = getattr(detector, "loss_curve_", None)
        if curve:
            log_path = target_dir / "training_log.csv"
            with open(log_path, "w", encoding="utf-8", newline="") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(["epoch", "loss"])
                for epoch, loss in enumerate(curve, 1):
                    writer.writerow([epoch, repr(loss)])
        print(f"trained {args.detector} detector for {machine} -> {target_dir}")
    run_config = {k: str(v) if isinstance(v, Path) else v for k, v in vars(args).items()}
    run_config.pop("config", None)
    (out / "train_config.json").write_text(
        json.dumps(run_config, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return EXIT_OK


def cmd_score(args) -> int:
    index = scan_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    total = 0
    for machine in _select_machines(index, args.machine):
        model_dir = Path(args.models) / machine
        detector = load_detector(model_dir)
        records = score_dataset(detector, index, machine)
        by_cell: dict[tuple[int, str], list[ScoreRecord]] = {}
        for record in records:
            by_cell.setdefault((record.meta.section, record.meta.domain), []).append(record)
        for (section, domain), cell_records in sorted(by_cell.items()):
            path = out / _score_file_name(machine, section, domain)
            with open(path, "w", encoding="utf-8", newline="") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(["filename", "score"])
                rows = sorted(
                    (corpus.format_clip_path(r.meta).split("/")[1], r.score)
                    for r in cell_records
                )
                for filename, score in rows:
                    writer.writerow([filename, repr(score)])
            total += len(cell_records)
        print(f"scored {len(records)} test clips for {machine}")
    print(f"wrote {total} scores under {out}")
    return EXIT_OK


def read_score_records(scores_dir, index) -> list[ScoreRecord]:
    """Load challenge-format score CSVs back into score records."""
    scores_dir = Path(scores_dir)
    if not scores_dir.is_dir():
        raise FileNotFoundError(f"scores directory {scores_dir} does not exist")
    records = []
    machines = set(index.machines)
    for path in sorted(scores_dir.glob("anomaly_score_*.csv")):
        stem = path.stem[len("anomaly_score_") :]
        machine = next((m for m in machines if stem.startswith(m + "_section_")), None)
        if machine is None:
            raise ScoreValidationError(f"cannot match {path.name} to a corpus machine", [path.name])
        with open(path, "r", encoding="utf-8", newline="") as fh:
            for row in csv.DictReader(fh):
                meta = corpus.parse_clip_path(f"{machine}/{row['filename']}")
                records.append(ScoreRecord(meta, float(row["score"])))
    if not records:
        raise FileNotFoundError(f"no score files found under {scores_dir}")
    return records


def cmd_eval(args) -> int:
    index = scan_dataset(args.data)
    if args.trials:
        return _run_trials(args, index)
    if args.scores is None:
        raise UsageError("eval needs --scores (or --trials with --detector)")
    records = read_score_records(args.scores, index)
    report = evaluate(index, records, p=args.p)
    _emit_report(report, args.out)
    return EXIT_OK


def _emit_report(report, out_dir):
    print(report.to_markdown())
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(report.to_csv(), encoding="utf-8")
        (out / "report.md").write_text(report.to_markdown(), encoding="utf-8")
        print(f"wrote {out / 'metrics.csv'} and {out / 'report.md'}")


def _run_trials(args, index) -> int:
    """Repeat train+score+eval over consecutive seeds; report mean +/- std."""
    if args.detector is None:
        raise UsageError("--trials needs --detector")
    if args.out is None:
        raise UsageError("--trials needs --out for its working directories")
    out = Path(args.out)
    reports = []
    for trial in range(args.trials):
        seed = args.seed + trial
        trial_dir = out / "trials" / f"seed_{seed:04d}"
        options = _train_options(args)
        options.seed = seed
        machine_list = _select_machines(index, args.machine)
        all_records = []
        for machine in machine_list:
            detector = fit_detector(args.detector, index, machine, options)
            save_detector(detector, trial_dir / "models" / machine)
            all_records.extend(score_dataset(detector, index, machine))
        report = evaluate(index, all_records, p=args.p)
        reports.append(report)
        print(f"trial seed {seed}: official score {report.official:.4f}")

    keys = [(c.machine, c.section, c.domain) for c in reports[0].cells]
    lines = [
        "| machine | section | domain | AUC | pAUC |",
        "| --- | --- | --- | --- | --- |",
    ]
    csv_lines = ["machine,section,domain,auc_mean,auc_std,pauc_mean,pauc_std"]
    for key in keys:
        aucs = [next(c.auc for c in r.cells if (c.machine, c.section, c.domain) == key) for r in reports]
        paucs = [next(c.pauc for c in r.cells if (c.machine, c.section, c.domain) == key) for r in reports]
        machine, section, domain = key
        lines.append(
            f"| {machine} | {section:02d} | {domain} "
            f"| {np.mean(aucs):.4f} ± {np.std(aucs):.4f} "
            f"| {np.mean(paucs):.4f} ± {np.std(paucs):.4f} |"
        )
        csv_lines.append(
            f"{machine},{section},{domain},{np.mean(aucs)!r},{np.std(aucs)!r},"
            f"{np.mean(paucs)!r},{np.std(paucs)!r}"
        )
    officials = [r.official for r in reports]
    lines.append("")
    lines.append(f"official score: {np.mean(officials):.4f} ± {np.std(officials):.4f}")
    table = "\n".join(lines) + "\n"
    print(table)
    out.mkdir(parents=True, exist_ok=True)
    (out / "trials_report.md").write_text(table, encoding="utf-8")
    (out / "trials_metrics.csv").write_text("\n".join(csv_lines) + "\n", encoding="utf-8")
    return EXIT_OK


_HANDLERS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "score": cmd_score,
    "eval": cmd_eval,
}


def _fail(code: int, message: str) -> int:
    first_line = str(message).splitlines()[0] if str(message) else "unknown error"
    print(f"E{code}: {first_line}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        config = {}
        if args.config is not None:
            config = json.loads(Path(args.config).read_text(encoding="utf-8"))
        _resolve(args, config)
        return _HANDLERS[args.command](args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, str(exc))
    except OutputTreeError as exc:
        return _fail(EXIT_EXISTS, str(exc))
    except FileNotFoundError as exc:
        return _fail(EXIT_MISSING, str(exc))
    except (
        ScoreValidationError,
        UndefinedMetricError,
        InsufficientSectionsError,
        ValueError,
    ) as exc:
        return _fail(EXIT_INVALID, str(exc))


if __name__ == "__main__":
    sys.exit(main())
