"""Command-line entry points.

Subcommands: train (one experiment), ablate (all ablation arms),
variance-trace (observation only, no updates), grad-check (finite-difference
validation of the model's gradients), oracle-check (analytic variance
estimate vs the brute-force oracle).

Any config key can be overridden with ``--key=value``; unknown keys are a
hard error. The AGVM_SEED environment variable overrides the config seed
(explicit --seed=... flags still win).
"""

from __future__ import annotations

import argparse
import sys

from .harness import (ablation_suite, emit_csv, load_config, oracle_check,
                      run_experiment, summary_text, variance_trace)
from .models import ConfigError, SyntheticModel, make_dataset
from .tensor import grad_check


def _split_overrides(extras):
    overrides = {}
    for token in extras:
        if not token.startswith("--") or "=" not in token:
            raise ConfigError(f"unrecognized argument {token!r}; overrides look like --key=value")
        key, value = token[2:].split("=", 1)
        overrides[key] = value
    return overrides


def _build_parser():
    parser = argparse.ArgumentParser(prog="agvm", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--out", help="trace CSV path")

    common(sub.add_parser("train", help="run one experiment"))
    ab = sub.add_parser("ablate", help="run the ablation arms with identical seeds")
    ab.add_argument("--config", help="flat key = value config file")
    ab.add_argument("--out-dir", help="directory for per-arm trace CSVs")
    common(sub.add_parser("variance-trace", help="trace per-module variance without updates"))
    gc = sub.add_parser("grad-check", help="finite-difference check of model gradients")
    gc.add_argument("--config", help="flat key = value config file")
    gc.add_argument("--probes", type=int, default=20)
    oc = sub.add_parser("oracle-check", help="variance estimate vs brute-force oracle")
    oc.add_argument("--seed", type=int, default=0)
    oc.add_argument("--resamples", type=int, default=None)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args, extras = parser.parse_known_args(argv)
    try:
        return _dispatch(args, extras)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _dispatch(args, extras) -> int:
    if args.command == "oracle-check":
        if extras:
            raise ConfigError(f"unrecognized arguments: {' '.join(extras)}")
        report = oracle_check(seed=args.seed, resamples=args.resamples)
        print(summary_text(report))
        return 0

    overrides = _split_overrides(extras)

    if args.command == "grad-check":
        config = load_config(args.config, overrides)
        model = SyntheticModel(config.model_config(), seed=config.seed)
        inputs, targets = make_dataset(config.n_samples, config.input_dim,
                                       config.output_dim, config.noise_std,
                                       config.dataset_seed)
        batch = min(8, config.n_samples)
        err = grad_check(lambda: model.loss(inputs[:batch], targets[:batch], mask_seed=0),
                         model.params, probe_count=args.probes, seed=config.seed)
        print(summary_text({"max_rel_err": err, "probes": args.probes}))
        return 0

    if args.command == "ablate":
        config = load_config(args.config, overrides)
        results = ablation_suite(config)
        for arm, summary in results.items():
            print(f"[{arm}]")
            print(summary_text(summary))
            print()
        return 0

    config = load_config(args.config, overrides)
    result = variance_trace(config) if args.command == "variance-trace" else run_experiment(config)
    if args.out:
        emit_csv(result.trace, args.out)
    print(summary_text(result.summary))
    return 0


if __name__ == "__main__":
    sys.exit(main())
