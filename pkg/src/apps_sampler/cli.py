"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 configuration error, 3 runtime error.
"""

import argparse
import json
import os
import sys

from .config import ExperimentConfig
from .exceptions import APPSError, ConfigurationError

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _add_overrides(p):
    g = p.add_argument_group("run overrides")
    g.add_argument("--alpha", type=float)
    g.add_argument("--particles", type=int, help="population size (P_max)")
    g.add_argument("--min-particles", type=int)
    g.add_argument("--block-size", type=int)
    g.add_argument("--max-tokens", type=int)
    g.add_argument("--temperature", type=float)
    g.add_argument("--eta", type=float, help="selection potential strength")
    g.add_argument("--apf", choices=("none", "rollout", "learned"))
    g.add_argument("--rollouts", type=int)
    g.add_argument("--horizon", type=int)
    g.add_argument("--head", help="trained value head JSON for --apf learned")
    g.add_argument("--seed", type=int)
    g.add_argument("--kappa", type=float, help="resampling threshold on ESS/P")
    g.add_argument("--correction", choices=("heuristic", "auxiliary-corrected"))
    g.add_argument("--scheme", choices=("multinomial", "systematic"))
    g.add_argument("--dynamic-allocation", action="store_true", default=None)
    g.add_argument("--elite", action="store_true", default=None)
    g.add_argument("--finalize", choices=("weighted-sample", "best-score"))
    g.add_argument("--oracle-check", action="store_true", default=None)
    g.add_argument("--repetitions", type=int)
    g.add_argument("--workers", type=int)
    g.add_argument("--out", help="output directory")


_RUN_FLAGS = {
    "alpha": "alpha",
    "particles": "max_particles",
    "min_particles": "min_particles",
    "block_size": "block_size",
    "max_tokens": "max_tokens",
    "eta": "apf_strength",
    "apf": "apf_mode",
    "seed": "seed",
    "kappa": "ess_threshold",
    "correction": "correction_mode",
    "scheme": "resample_scheme",
    "dynamic_allocation": "dynamic_allocation",
    "elite": "elite_preservation",
    "finalize": "finalize_rule",
}


def load_config(args):
    data = {}
    base_dir = "."
    if getattr(args, "config", None):
        path = args.config
        if not os.path.isfile(path):
            raise ConfigurationError(f"config file not found: {path}")
        cfg = ExperimentConfig.from_file(path)
        data = cfg.to_dict()
        base_dir = os.path.dirname(os.path.abspath(path))
    run = data.setdefault("run", {})
    for flag, key in _RUN_FLAGS.items():
        val = getattr(args, flag, None)
        if val is not None:
            run[key] = val
    if run.get("max_particles") is not None and "min_particles" not in run:
        run["min_particles"] = min(8, run["max_particles"])
    if run.get("max_particles") is not None and run.get("min_particles", 0) > run["max_particles"]:
        run["min_particles"] = run["max_particles"]
    if getattr(args, "temperature", None) is not None:
        run.setdefault("proposal", {})["temperature"] = args.temperature
    pot = data.setdefault("potential", {})
    roll = pot.setdefault("rollout", {})
    if getattr(args, "rollouts", None) is not None:
        roll["n_rollouts"] = args.rollouts
    if getattr(args, "horizon", None) is not None:
        roll["horizon"] = args.horizon
    if getattr(args, "head", None):
        pot["head"] = os.path.abspath(args.head)
    for flag in ("oracle_check", "repetitions", "workers"):
        if getattr(args, flag, None) is not None:
            data[flag] = getattr(args, flag)
    if getattr(args, "out", None):
        data["output_dir"] = args.out
    return ExperimentConfig.from_dict(data, base_dir)


def _write(path, text):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(text)


def cmd_run(args):
    from .harness import run_experiment, write_run_artifacts

    cfg = load_config(args)
    report, traces = run_experiment(cfg)
    paths = write_run_artifacts(report, traces, cfg.output_dir)
    print(json.dumps({"artifacts": paths, "completions": [r["completion"] for r in report.records]}))
    return EXIT_OK


def cmd_baseline(args):
    from .harness import baseline
    from .lm import build_model

    cfg = load_config(args)
    model = build_model(cfg.model)
    res = baseline(args.kind, model, args.samples, cfg.run.max_tokens, cfg.run.alpha, args.n, cfg.run.seed, cfg.prompt)
    out = {"kind": args.kind, "completions": [list(c) for c in res.completions], "log_p": res.log_p.tolist()}
    text = json.dumps(out, sort_keys=True) + "\n"
    if args.out:
        _write(os.path.join(args.out, f"baseline_{args.kind}.json"), text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_study(args):
    from .harness import run_study

    cfg = load_config(args)
    if args.kind:
        cfg.study["kind"] = args.kind
    if args.repetitions is not None:
        cfg.study["repetitions"] = args.repetitions
    report = run_study(cfg)
    report.write(cfg.output_dir)
    print(json.dumps({"study": report.name, "summary": report.summary}, sort_keys=True))
    return EXIT_OK


def cmd_oracle(args):
    from .lm import build_model
    from .oracle import enumerate_power_target

    cfg = load_config(args)
    model = build_model(cfg.model)
    tables = enumerate_power_target(model, model.encode_prompt(cfg.prompt), args.blocks, cfg.run.block_size,
                                    cfg.run.alpha)
    dist = tables.sequence_distribution()
    out = {
        "log_Z": tables.log_Z,
        "sequences": [list(s) for s in dist.support],
        "probs": dist.probs.tolist(),
        "final_block_marginal": tables.block_marginal(args.blocks).probs.tolist(),
    }
    text = json.dumps(out, sort_keys=True) + "\n"
    if args.out:
        _write(os.path.join(args.out, "oracle.json"), text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_collect(args):
    from .lm import build_model
    from .value_head import collect_supervision

    cfg = load_config(args)
    model = build_model(cfg.model)
    seeds = range(cfg.run.seed, cfg.run.seed + cfg.repetitions)
    data = collect_supervision(model, [cfg.prompt], cfg.run, cfg.rollout, seeds)
    _write(args.output, data.to_jsonl())
    print(json.dumps({"rows": len(data), "groups": int(data.group_ids.size), "path": args.output}))
    return EXIT_OK


def cmd_train_head(args):
    from .value_head import SupervisionSet, TrainConfig, train

    if not os.path.isfile(args.data):
        raise ConfigurationError(f"data file not found: {args.data}")
    with open(args.data) as fh:
        data = SupervisionSet.from_jsonl(fh.read())
    overrides = {}
    if args.epochs is not None:
        overrides["max_epochs"] = args.epochs
    if args.lr is not None:
        overrides["learning_rate"] = args.lr
    result = train(data, TrainConfig(**overrides), args.seed)
    result.head.save(args.output)
    if args.log:
        _write(args.log, result.history_csv())
    best = result.history[result.best_epoch - 1]
    print(json.dumps({"best_epoch": result.best_epoch, "val_top1": best["val_top1"], "path": args.output}))
    return EXIT_OK


def build_parser():
    parser = _Parser(prog="apps", description="Particle sampling from power distributions of toy autoregressive models.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("run", help="run the sampler and write trace, summary and metrics")
    p.add_argument("config", nargs="?")
    _add_overrides(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("baseline", help="ancestral, low-temperature or best-of-n decoding")
    p.add_argument("kind", choices=("ancestral", "low-temp", "best-of-n"))
    p.add_argument("--config")
    p.add_argument("--samples", type=int, default=1)
    p.add_argument("--n", type=int, default=4, help="candidates per best-of-n sample")
    _add_overrides(p)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("study", help="convergence, bias or planted-mode study")
    p.add_argument("config", nargs="?")
    p.add_argument("--kind", choices=("convergence", "bias", "planted"))
    _add_overrides(p)
    p.set_defaults(func=cmd_study)

    p = sub.add_parser("oracle", help="exact power target of a small model")
    p.add_argument("--config")
    p.add_argument("--blocks", type=int, default=2)
    _add_overrides(p)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("collect", help="collect rollout supervision for the value head")
    p.add_argument("config", nargs="?")
    p.add_argument("--output", required=True)
    _add_overrides(p)
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("train-head", help="train a value head on collected supervision")
    p.add_argument("data")
    p.add_argument("--output", required=True)
    p.add_argument("--log", help="per-epoch CSV")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train_head)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (APPSError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
