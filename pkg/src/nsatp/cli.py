"""Command line entry point.

Subcommands cover the full workflow: ``simulate`` writes a synthetic
dataset, ``train`` fits a model and writes checkpoint plus report,
``evaluate`` scores an existing checkpoint, ``ablate`` sweeps the
standardization/recovery switch grid, ``adf`` runs the per-window
standardization unit-root study, and ``gradcheck`` verifies the
autodiff engine against finite differences.

Exit codes: 0 success, 1 failed check, 2 configuration error,
3 divergence, 4 I/O error.
"""

from __future__ import annotations

import argparse
import sys

from . import __version__, gradcheck, harness
from .harness import ConfigError, DivergenceError

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4


def build_parser():
    parser = argparse.ArgumentParser(
        prog="nsatp",
        description="Transit arrival forecasting with standardized windows "
                    "and learned recovery of the removed statistics.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic arrival dataset")
    p.add_argument("--config", required=True, help="TOML file with a [sim] section")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", required=True, help="output dataset file (JSONL)")

    p = sub.add_parser("train", help="train a model and write checkpoint + report")
    p.add_argument("--config", required=True, help="TOML file with an [experiment] section")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", required=True, help="run directory")

    p = sub.add_parser("evaluate", help="score a checkpoint on a dataset's test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--horizon", type=int, default=None,
                   help="expected forecast horizon; must match the checkpoint")
    p.add_argument("--out", default=None, help="optional directory for the report")

    p = sub.add_parser("ablate", help="train every standardization/recovery combination")
    p.add_argument("--config", required=True, help="TOML file with an [experiment] section")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", required=True, help="run directory")

    p = sub.add_parser("adf", help="unit-root study of per-window standardization")
    p.add_argument("--config", required=True, help="TOML file with a [sim] section")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--windows", type=int, default=500, help="windows per side of the study")
    p.add_argument("--window-len", type=int, default=30)
    p.add_argument("--stride", type=int, default=10)

    p = sub.add_parser("gradcheck", help="finite-difference check of the autodiff engine")
    p.add_argument("--seed", type=int, default=0)
    return parser


def _cmd_simulate(args):
    config = harness.load_sim_config(args.config, seed=args.seed)
    summary = harness.simulate(config, args.out)
    print(f"wrote {summary['n_samples']} samples to {summary['path']}")
    print(f"splits: train={summary['n_train']} val={summary['n_val']} "
          f"test={summary['n_test']}")
    if summary["skipped_trips"]:
        print(f"skipped {summary['skipped_trips']} trips too short for the window")
    return EXIT_OK


def _cmd_train(args):
    config = harness.load_experiment_config(args.config, seed=args.seed)
    report = harness.train(config, args.out)
    print(harness.format_report(report), end="")
    return EXIT_OK


def _cmd_evaluate(args):
    report = harness.evaluate_checkpoint(
        args.checkpoint, args.dataset, horizon=args.horizon
    )
    if args.out is not None:
        harness.write_report(args.out, report)
    print(harness.format_report(report), end="")
    return EXIT_OK


def _cmd_ablate(args):
    config = harness.load_experiment_config(args.config, seed=args.seed)
    summary = harness.ablate(config, args.out)
    print(harness.format_ablation(summary), end="")
    return EXIT_OK


def _cmd_adf(args):
    config = harness.load_sim_config(args.config, seed=args.seed)
    study = harness.adf_study_from_sim(
        config, window_len=args.window_len, stride=args.stride, n_windows=args.windows
    )
    print(f"windows: {study.n_windows} of length {study.window_len}")
    print(f"mean unit-root statistic, raw windows:          {study.mean_before:10.4f}")
    print(f"mean unit-root statistic, standardized windows: {study.mean_after:10.4f}")
    delta = study.mean_after - study.mean_before
    print(f"shift: {delta:+.4f} ({'more' if delta < 0 else 'less'} stationary)")
    return EXIT_OK


def _cmd_gradcheck(args):
    results = gradcheck.run_all(seed=args.seed)
    width = max(len(r.name) for r in results)
    all_ok = True
    for r in results:
        verdict = "ok" if r.ok else "FAIL"
        print(f"{r.name:<{width}}  max rel err {r.max_error:9.3e}  "
              f"tol {r.tolerance:.0e}  {verdict}")
        all_ok &= r.ok
    print("gradcheck passed" if all_ok else "gradcheck FAILED")
    return EXIT_OK if all_ok else EXIT_CHECK_FAILED


_HANDLERS = {
    "simulate": _cmd_simulate,
    "train": _cmd_train,
    "evaluate": _cmd_evaluate,
    "ablate": _cmd_ablate,
    "adf": _cmd_adf,
    "gradcheck": _cmd_gradcheck,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        if exc.report is not None:
            print("a partial report was written to the run directory", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
