"""Command-line entry point.

Subcommands: gen-data, train, eval, verify, export-plots. Every flag has a
config-file equivalent (--config takes a JSON object whose keys mirror the
flags); explicit flags override file values. ENTSFT_HOME sets the default
base directory for datasets and runs. Exit codes: 0 success, 1 runtime
failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import data as data_mod
from . import evalmetrics, report, trainer, verifysuite
from .trainer import ConfigError

CLI_REGULARIZERS = {
    "none": "none",
    "entropy": "entropy",
    "entropy-top": "entropy_top_fraction",
    "kl-base": "kl_to_base",
    "sed": "sed",
}


def _home() -> Path:
    return Path(os.environ.get("ENTSFT_HOME", "."))


def _parse_range(text: str) -> tuple[int, int]:
    """Parse '2..4' or a single integer into (low, high)."""
    parts = text.split("..")
    try:
        if len(parts) == 1:
            v = int(parts[0])
            return v, v
        if len(parts) == 2:
            return int(parts[0]), int(parts[1])
    except ValueError:
        pass
    raise argparse.ArgumentTypeError(f"expected N or N..M, got {text!r}")


def _load_json_config(path) -> dict:
    try:
        payload = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}")
    if not isinstance(payload, dict):
        raise ConfigError("config file must contain a JSON object")
    return payload


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="entsft",
        description="Entropy-preserving SFT on synthetic verifiable tasks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--config", type=str, default=None, help="JSON file of flag defaults")
    p.add_argument("--task", choices=data_mod.TASKS, default=None)
    p.add_argument("--digits", type=_parse_range, default=None,
                   help="operand digits (add) as N or N..M")
    p.add_argument("--len", dest="length", type=_parse_range, default=None,
                   help="string length (copy/reverse) as N or N..M")
    p.add_argument("--n-train", type=int, default=None)
    p.add_argument("--n-eval", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", type=str, default=None)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", type=str, default=None, help="JSON TrainConfig file")
    p.add_argument("--data", type=str, default=None, help="dataset directory")
    p.add_argument("--out", type=str, default=None, help="run output directory")
    p.add_argument("--regularizer", choices=sorted(CLI_REGULARIZERS), default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--top-fraction", type=float, default=None)
    p.add_argument("--teacher-mode", choices=("separate", "shared"), default=None)
    p.add_argument("--fixed-tau", type=float, default=None,
                   help="disable the adaptive search and use this teacher temperature")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--steps", type=int, default=None, help="cap on optimizer steps")
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--eval-every", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--pivot", type=float, default=None, help="entropy gate pivot (nats)")
    p.add_argument("--resume", type=str, default=None, help="checkpoint to resume from")
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--config", type=str, default=None, help="JSON file of flag defaults")
    p.add_argument("--checkpoint", type=str, default=None, required=False)
    p.add_argument("--data", type=str, default=None)
    p.add_argument("--n-prompts", type=int, default=None)
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--top-p", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--report", type=str, default=None, help="JSONL report path to append")

    p = sub.add_parser("verify", help="run the brute-force verification suites")
    p.add_argument("--config", type=str, default=None, help="JSON file of flag defaults")
    p.add_argument("--only", choices=sorted(verifysuite.SUITES), action="append",
                   default=None, help="run only the named suite (repeatable)")
    p.add_argument("--report", type=str, default=None, help="JSONL report path")

    p = sub.add_parser("export-plots", help="export aligned series and figures")
    p.add_argument("--config", type=str, default=None, help="JSON file of flag defaults")
    p.add_argument("--runs", nargs="+", default=None, help="run directories")
    p.add_argument("--out", type=str, default=None)
    p.add_argument("--no-figures", action="store_true")
    return parser


def _merged(args, file_keys: dict, defaults: dict) -> dict:
    """Resolve flag values: explicit flag > config file > default."""
    payload = {}
    if args.config:
        raw = _load_json_config(args.config)
        unknown = sorted(set(raw) - set(file_keys))
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        payload.update(raw)
    out = dict(defaults)
    for file_key, attr in file_keys.items():
        if file_key in payload:
            out[file_key] = payload[file_key]
        value = getattr(args, attr)
        if value is not None and value is not False:
            out[file_key] = value
    return out


def cmd_gen_data(args) -> int:
    opts = _merged(args, {
        "task": "task", "digits": "digits", "len": "length",
        "n_train": "n_train", "n_eval": "n_eval", "seed": "seed", "out": "out",
    }, {
        "task": "multi_digit_add", "digits": None, "len": None,
        "n_train": 20000, "n_eval": 1000, "seed": 0,
        "out": str(_home() / "data"),
    })
    size = opts["digits"] if opts["digits"] is not None else opts["len"]
    if size is None:
        size = (2, 4)
    if isinstance(size, str):
        size = _parse_range(size)
    low, high = size
    try:
        spec = data_mod.TaskSpec(task=opts["task"], low=low, high=high,
                                 n_train=opts["n_train"], n_eval=opts["n_eval"],
                                 seed=opts["seed"])
    except ValueError as exc:
        raise ConfigError(f"--digits/--len: {exc}")
    dataset = data_mod.generate(spec)
    paths = data_mod.write_dataset(dataset, opts["out"])
    print(f"wrote {len(dataset.train)} train / {len(dataset.eval)} eval examples "
          f"for task {spec.task} under {opts['out']}")
    for name, path in paths.items():
        print(f"  {name}: {path}")
    return 0


def cmd_train(args) -> int:
    if args.config:
        cfg = trainer.load_config_file(args.config)
    else:
        cfg = trainer.TrainConfig()
    if args.data is not None:
        cfg.data_dir = args.data
    elif not args.config:
        cfg.data_dir = str(_home() / "data")
    if args.out is not None:
        cfg.out_dir = args.out
    elif not args.config:
        cfg.out_dir = str(_home() / "runs" / "run")
    if args.regularizer is not None:
        cfg.regularizer.kind = CLI_REGULARIZERS[args.regularizer]
    if args.alpha is not None:
        cfg.regularizer.alpha = args.alpha
    if args.top_fraction is not None:
        cfg.regularizer.top_fraction = args.top_fraction
    if args.teacher_mode is not None:
        cfg.teacher.mode = args.teacher_mode
    if args.fixed_tau is not None:
        cfg.regularizer.fixed_tau = args.fixed_tau
    if args.seed is not None:
        cfg.seed = args.seed
    if args.epochs is not None:
        cfg.epochs = args.epochs
    if args.steps is not None:
        cfg.max_steps = args.steps
    if args.batch_size is not None:
        cfg.batch_size = args.batch_size
    if args.eval_every is not None:
        cfg.eval_every = args.eval_every
    if args.lr is not None:
        cfg.optimizer.learning_rate = args.lr
    if args.pivot is not None:
        cfg.gate.pivot = args.pivot
    # Re-validate after the overrides.
    cfg = trainer.config_from_dict(trainer.config_to_dict(cfg))

    log = (lambda *a, **k: None) if args.quiet else print
    result = trainer.train(cfg, resume_from=args.resume, log=log)
    print(f"run complete: {result['steps']} steps")
    print(f"  checkpoint: {result['checkpoint']}")
    print(f"  metrics:    {result['metrics']}")
    print(f"  evals:      {result['evals']}")
    return 0


def cmd_eval(args) -> int:
    opts = _merged(args, {
        "checkpoint": "checkpoint", "data": "data", "n_prompts": "n_prompts",
        "samples": "samples", "tau": "tau", "top_p": "top_p", "seed": "seed",
        "report": "report",
    }, {
        "checkpoint": None, "data": str(_home() / "data"), "n_prompts": 256,
        "samples": 8, "tau": 0.6, "top_p": 0.95, "seed": 0, "report": None,
    })
    if not opts["checkpoint"]:
        raise ConfigError("--checkpoint is required")
    ckpt_path = Path(opts["checkpoint"])
    if not ckpt_path.exists():
        raise ConfigError(f"checkpoint not found: {ckpt_path}")
    dataset = data_mod.load_dataset(opts["data"])
    state = trainer.load_state(ckpt_path, dataset)
    examples = dataset.eval[: opts["n_prompts"]]

    stats = evalmetrics.eval_entropy_stats(
        state.params, state.model_cfg, state.vocab, examples,
        k_top=state.cfg.search.top_k)
    greedy = evalmetrics.greedy_accuracy(
        state.params, state.model_cfg, state.vocab, state.task, examples)
    rates = evalmetrics.pass_at_k(
        state.params, state.model_cfg, state.vocab, state.task, examples,
        opts["samples"], opts["tau"], opts["top_p"], opts["seed"])
    diversity = evalmetrics.sample_diversity(
        state.params, state.model_cfg, state.vocab,
        examples[: min(len(examples), 64)], opts["samples"],
        opts["tau"], opts["top_p"], opts["seed"])

    record = {
        "step": state.step,
        "checkpoint": str(ckpt_path),
        "eval_entropy": round(stats["mean_entropy"], 6),
        "entropy_top20": round(stats["top_fraction_mean"], 6),
        "entropy_bottom80": round(stats["bottom_fraction_mean"], 6),
        "greedy_accuracy": greedy,
        "pass_at_k": rates.pass_at_k,
        "avg_at_k": rates.avg_at_k,
        "k": rates.k,
        "n_prompts": len(examples),
        "ngram_diversity": diversity,
    }
    print(json.dumps(record, indent=2, sort_keys=True))
    if opts["report"]:
        path = Path(opts["report"])
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
        print(f"appended report record to {path}")
    return 0


def cmd_verify(args) -> int:
    opts = _merged(args, {"only": "only", "report": "report"},
                   {"only": None, "report": None})
    try:
        records = verifysuite.run_suites(only=opts["only"])
    except ValueError as exc:
        raise ConfigError(str(exc))
    width = max(len(r["check"]) for r in records)
    all_pass = True
    for rec in records:
        status = "PASS" if rec["pass"] else "FAIL"
        all_pass &= rec["pass"]
        print(f"{status}  {rec['check']:<{width}}  residual {rec['residual']:.3e}  "
              f"tolerance {rec['tolerance']:.1e}")
    if opts["report"]:
        path = Path(opts["report"])
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        print(f"report written to {path}")
    print("all checks passed" if all_pass else "SOME CHECKS FAILED")
    return 0 if all_pass else 1


def cmd_export_plots(args) -> int:
    opts = _merged(args, {"runs": "runs", "out": "out"},
                   {"runs": None, "out": str(_home() / "reports")})
    if not opts["runs"]:
        raise ConfigError("--runs is required")
    for run in opts["runs"]:
        if not Path(run).exists():
            raise ConfigError(f"run directory not found: {run}")
    try:
        result = report.export(opts["runs"], opts["out"],
                               render=not args.no_figures)
    except FileNotFoundError as exc:
        raise ConfigError(str(exc))
    for path in result["series"]:
        print(f"series: {path}")
    for path in result["figures"]:
        print(f"figure: {path}")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "gen-data": cmd_gen_data,
        "train": cmd_train,
        "eval": cmd_eval,
        "verify": cmd_verify,
        "export-plots": cmd_export_plots,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (trainer.TrainingAbort, FileNotFoundError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
