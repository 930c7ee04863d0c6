"""Command-line entry point: synth, train, eval, gradcheck, export-energies.

Configuration is a JSON document with optional "synth", "train", and "hyper"
sections mirroring SynthSpec, TrainConfig, and ScaleHyper. Precedence is
defaults < config file < command-line flags, and every run directory receives
the fully resolved document (resolved_config.json) so results can be
reproduced from it alone.

Exit codes: 0 success, 1 validation error, 2 numerical abort or failed
gradient certification, 3 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .databank import BankFormatError, SynthSpec, load_bank, save_bank, synthesize_bank
from .diffcore import NumericalError
from .gradcheck import run_gradcheck
from .objectives import ScaleHyper
from .trainer import CHECKPOINT_NAME, TrainConfig, load_checkpoint, train
from .zeroshot import SEEN_HOLDOUT, UNSEEN_TEST, evaluate, export_energies

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERICAL = 2
EXIT_IO = 3

_SYNTH_FIELDS = [f.name for f in dataclasses.fields(SynthSpec)]
_HYPER_FIELDS = [f.name for f in dataclasses.fields(ScaleHyper)]
_TRAIN_FIELDS = [f.name for f in dataclasses.fields(TrainConfig) if f.name != "hyper"]


class ConfigError(ValueError):
    pass


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{p}: top level must be an object")
    known_sections = {"synth": _SYNTH_FIELDS, "train": _TRAIN_FIELDS, "hyper": _HYPER_FIELDS}
    unknown = set(doc) - set(known_sections)
    if unknown:
        raise ConfigError(f"{p}: unknown config sections {sorted(unknown)}")
    for section, fields in known_sections.items():
        sub = doc.get(section, {})
        if not isinstance(sub, dict):
            raise ConfigError(f"{p}: section {section!r} must be an object")
        bad = set(sub) - set(fields)
        if bad:
            raise ConfigError(f"{p}: unknown keys in {section!r}: {sorted(bad)}")
    return doc


def _resolve(section_defaults, file_section: dict, args: argparse.Namespace, names: list[str]) -> dict:
    resolved = {}
    for name in names:
        value = getattr(section_defaults, name)
        if name in file_section:
            value = file_section[name]
        arg_value = getattr(args, name, None)
        if arg_value is not None:
            value = arg_value
        resolved[name] = value
    return resolved


def _resolve_all(args: argparse.Namespace) -> dict:
    doc = _load_config_file(getattr(args, "config", None))
    return {
        "synth": _resolve(SynthSpec(), doc.get("synth", {}), args, _SYNTH_FIELDS),
        "train": _resolve(TrainConfig(), doc.get("train", {}), args, _TRAIN_FIELDS),
        "hyper": _resolve(ScaleHyper(), doc.get("hyper", {}), args, _HYPER_FIELDS),
    }


def _echo_config(resolved: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved_config.json").write_text(json.dumps(resolved, indent=2) + "\n")


def _train_config(resolved: dict) -> TrainConfig:
    return TrainConfig(hyper=ScaleHyper(**resolved["hyper"]), **resolved["train"])


def _add_config_flags(parser: argparse.ArgumentParser, names: list[str], types: dict) -> None:
    for name in names:
        flag = "--" + name.replace("_", "-")
        parser.add_argument(flag, type=types[name], default=None, dest=name)


def _field_types(cls) -> dict:
    types = {}
    for f in dataclasses.fields(cls):
        types[f.name] = int if f.type in ("int", int) else float
    return types


def cmd_synth(args: argparse.Namespace) -> int:
    resolved = _resolve_all(args)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigError(f"output directory {out} is not empty (use --force to overwrite)")
    spec = SynthSpec(**resolved["synth"])
    bank = synthesize_bank(spec)
    save_bank(bank, out)
    _echo_config(resolved, out)
    print(f"wrote bank with {bank.n_samples} samples, {bank.n_classes} classes to {out}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    resolved = _resolve_all(args)
    cfg = _train_config(resolved)
    bank = load_bank(args.data)
    out = Path(args.out)
    _echo_config(resolved, out)
    resume = load_checkpoint(args.resume) if args.resume else None
    state, records = train(bank, cfg, out, resume=resume, max_epochs=args.max_epochs)
    last = records[-1] if records else {}
    print(f"trained to step {state.step}; checkpoint: {out / CHECKPOINT_NAME}")
    if last:
        print(f"final epoch {last['epoch']}: loss_total={last['loss_total']:.6f}")
    return EXIT_OK


def _split_classes(name: str) -> str:
    return {"unseen": UNSEEN_TEST, "seen": SEEN_HOLDOUT}[name]


def cmd_eval(args: argparse.Namespace) -> int:
    state = load_checkpoint(args.checkpoint)
    bank = load_bank(args.data)
    accuracy, table = evaluate(bank, state, _split_classes(args.split))
    csv_path = Path(args.out_csv) if args.out_csv else Path(args.checkpoint).parent / f"energies_{args.split}.csv"
    export_energies(table, csv_path)
    print(f"{accuracy:.4f}")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    report = run_gradcheck(args.seed, step=args.step, threshold=args.threshold)
    if args.out:
        Path(args.out).write_text(report.to_json() + "\n")
    status = "PASS" if report.passed else "FAIL"
    print(f"gradcheck seed={args.seed}: {status} "
          f"(worst {report.worst_error:.3e} at {report.worst_param}, "
          f"{report.n_excluded} coordinates excluded)")
    return EXIT_OK if report.passed else EXIT_NUMERICAL


def cmd_export_energies(args: argparse.Namespace) -> int:
    state = load_checkpoint(args.checkpoint)
    bank = load_bank(args.data)
    _, table = evaluate(bank, state, _split_classes(args.split))
    export_energies(table, Path(args.out))
    print(f"wrote {table.sample_ids.shape[0] * table.candidate_classes.shape[0]} rows to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scalezsl",
        description="Zero-shot recognition engine over feature banks (train, evaluate, verify).",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic feature bank")
    p_synth.add_argument("--config", help="JSON config document")
    p_synth.add_argument("--out", required=True, help="bank output directory")
    p_synth.add_argument("--force", action="store_true", help="write into a non-empty directory")
    _add_config_flags(p_synth, _SYNTH_FIELDS, _field_types(SynthSpec))

    p_train = sub.add_parser("train", help="train a model on a bank's seen classes")
    p_train.add_argument("--config", help="JSON config document")
    p_train.add_argument("--data", required=True, help="bank directory")
    p_train.add_argument("--out", required=True, help="run output directory")
    p_train.add_argument("--resume", help="checkpoint to continue from")
    p_train.add_argument("--max-epochs", type=int, default=None,
                         help="stop after this many epochs this invocation (schedules still span the configured total)")
    _add_config_flags(p_train, _TRAIN_FIELDS, _field_types(TrainConfig))
    _add_config_flags(p_train, _HYPER_FIELDS, _field_types(ScaleHyper))

    p_eval = sub.add_parser("eval", help="evaluate top-1 accuracy on a split")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--split", choices=["unseen", "seen"], default="unseen")
    p_eval.add_argument("--out-csv", help="energy table CSV path (default: next to checkpoint)")

    p_grad = sub.add_parser("gradcheck", help="certify analytic gradients against finite differences")
    p_grad.add_argument("--seed", type=int, default=0)
    p_grad.add_argument("--step", type=float, default=1e-5)
    p_grad.add_argument("--threshold", type=float, default=1e-4)
    p_grad.add_argument("--out", help="write the JSON report here")

    p_exp = sub.add_parser("export-energies", help="write the per-candidate energy table as CSV")
    p_exp.add_argument("--checkpoint", required=True)
    p_exp.add_argument("--data", required=True)
    p_exp.add_argument("--split", choices=["unseen", "seen"], default="unseen")
    p_exp.add_argument("--out", required=True)

    return parser


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "export-energies": cmd_export_energies,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors; remap to validation
        return EXIT_OK if exc.code in (0, None) else EXIT_VALIDATION
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, BankFormatError, ValueError, KeyError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
