"""Command-line entry points.

Subcommands: prep, synth, train, sweep, lr-sweep, compare, ns-check.
Every command exits 0 on success and 1 with an `error: ...` line on
stderr for expected failures (bad configs, missing files, invalid data).
"""

import argparse
import dataclasses
import json
import sys

from . import data, harness, linalg


def _float_list(text: str) -> list:
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected comma-separated floats, got {text!r}"
        )


def _emit(text: str, path) -> None:
    if path is None:
        sys.stdout.write(text)
        return
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _cmd_prep(args) -> int:
    records = data.ingest_csv(args.input)
    dataset = data.leave_one_out_split(data.five_core_filter(records))
    data.export_csv(dataset, args.out)
    total = sum(len(seq) for seq in dataset.sequences)
    print(f"users={dataset.num_users} items={dataset.num_items} "
          f"interactions={total}")
    print(f"fingerprint={dataset.fingerprint()}")
    return 0


def _cmd_synth(args) -> int:
    dataset = data.synth_generate(
        num_users=args.users,
        num_items=args.items,
        factors=args.factors,
        temperature=args.temperature,
        seq_len_range=(args.min_len, args.max_len),
        seed=args.seed,
    )
    data.export_csv(dataset, args.out)
    total = sum(len(seq) for seq in dataset.sequences)
    print(f"users={dataset.num_users} items={dataset.num_items} "
          f"interactions={total}")
    print(f"fingerprint={dataset.fingerprint()}")
    return 0


def _load_base_config(args) -> harness.RunConfig:
    config = harness.load_config(args.config)
    overrides = {}
    if getattr(args, "out", None) is not None:
        overrides["out_dir"] = args.out
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if overrides:
        config = dataclasses.replace(config, **overrides)
    return config


def _cmd_train(args) -> int:
    config = _load_base_config(args)
    record = harness.run_experiment(config)
    s = record.summary
    print(f"converged_step={s['converged_step']} "
          f"best_val_ndcg10={s['best_val_ndcg10']:.6f} "
          f"test_ndcg10={s['test_ndcg']['10']:.6f} "
          f"diverged={str(s['diverged']).lower()}")
    if config.out_dir is None:
        print(harness.metrics_csv_text(record, config.eval_ks), end="")
    return 0


def _cmd_sweep(args) -> int:
    config = _load_base_config(args)
    adam_grid = None
    if args.adam_lrs or args.adam_wds:
        adam_grid = {"lrs": args.adam_lrs or list(
                         harness.DEFAULT_ADAM_GRID["lrs"]),
                     "wds": args.adam_wds or list(
                         harness.DEFAULT_ADAM_GRID["wds"])}
    muon_grid = None
    if args.muon_lrs or args.muon_wds:
        muon_grid = {"lrs": args.muon_lrs or list(
                         harness.DEFAULT_MUON_GRID["lrs"]),
                     "wds": args.muon_wds or list(
                         harness.DEFAULT_MUON_GRID["wds"])}
    report = harness.two_stage_sweep(config, adam_grid, muon_grid,
                                     parallelism=args.parallelism)
    _emit(json.dumps(report, indent=2, sort_keys=True) + "\n", args.report)
    for stage in ("stage1", "stage2"):
        winner = report[stage]["winner"]
        print(f"{stage}_winner lr={winner['lr']:g} wd={winner['wd']:g} "
              f"best_val_ndcg10={winner['best_val_ndcg10']:.6f}")
    return 0


def _cmd_lr_sweep(args) -> int:
    config = _load_base_config(args)
    rows = harness.lr_sweep(config, args.lrs, parallelism=args.parallelism)
    _emit(harness.lr_sweep_csv_text(rows), args.report)
    return 0


def _cmd_compare(args) -> int:
    summaries = []
    for path in args.summaries:
        with open(path, encoding="utf-8") as fh:
            summaries.append(json.load(fh))
    table = harness.compare(summaries)
    _emit(json.dumps(table, indent=2, sort_keys=True) + "\n", args.report)
    return 0


def _cmd_ns_check(args) -> int:
    report = linalg.ns_check_report(per_shape=args.per_shape)
    verdicts = []
    for key, value in report.items():
        if isinstance(value, bool):
            verdicts.append(value)
            print(f"{key}={str(value).lower()}")
        elif isinstance(value, int):
            print(f"{key}={value}")
        else:
            print(f"{key}={value:.6e}")
    if not all(verdicts):
        print("error: Newton-Schulz property suite failed", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="orthorec",
        description="Optimizer benchmark harness for sequential recommenders",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prep", help="filter and split a raw interaction CSV")
    p.add_argument("input", help="raw CSV with header user_id,item_id,timestamp")
    p.add_argument("--out", required=True, help="path for the prepared CSV")
    p.set_defaults(func=_cmd_prep)

    p = sub.add_parser("synth", help="generate a synthetic interaction CSV")
    p.add_argument("--out", required=True)
    p.add_argument("--users", type=int, default=data.SYNTH_USERS)
    p.add_argument("--items", type=int, default=data.SYNTH_ITEMS)
    p.add_argument("--factors", type=int, default=data.SYNTH_FACTORS)
    p.add_argument("--temperature", type=float, default=data.SYNTH_TEMPERATURE)
    p.add_argument("--min-len", type=int, default=data.SYNTH_LEN_RANGE[0])
    p.add_argument("--max-len", type=int, default=data.SYNTH_LEN_RANGE[1])
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="run one experiment from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output directory override")
    p.add_argument("--seed", type=int, help="seed override")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("sweep", help="two-stage hyperparameter sweep")
    p.add_argument("--config", required=True, help="base run config")
    p.add_argument("--report", help="write the JSON report here (default stdout)")
    p.add_argument("--parallelism", type=int, default=1)
    p.add_argument("--adam-lrs", type=_float_list)
    p.add_argument("--adam-wds", type=_float_list)
    p.add_argument("--muon-lrs", type=_float_list)
    p.add_argument("--muon-wds", type=_float_list)
    p.add_argument("--seed", type=int, help="seed override")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("lr-sweep", help="single-axis learning-rate sweep")
    p.add_argument("--config", required=True)
    p.add_argument("--lrs", type=_float_list, required=True)
    p.add_argument("--report", help="write the CSV table here (default stdout)")
    p.add_argument("--parallelism", type=int, default=1)
    p.add_argument("--seed", type=int, help="seed override")
    p.set_defaults(func=_cmd_lr_sweep)

    p = sub.add_parser("compare", help="tabulate improvements across runs")
    p.add_argument("summaries", nargs="+", help="summary.json paths")
    p.add_argument("--report", help="write the JSON table here (default stdout)")
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("ns-check", help="Newton-Schulz property suite")
    p.add_argument("--per-shape", type=int, default=25)
    p.set_defaults(func=_cmd_ns_check)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
