"""Command-line entry point: gen-data, train, sweep, bench, eval."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from . import mining, workbench
from .data import save_dataset
from .embedding import load_checkpoint, save_checkpoint
from .errors import SmartMineError
from .metrics import CSV_HEADER, write_reports
from .trainer import BenchRow, TrainData, benchmark_mining, evaluate_params, train


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="smartmine", description="Smart triplet mining workbench")
    sub = p.add_subparsers(dest="command", required=True)
    for name, text in [
        ("gen-data", "write a synthetic clustered dataset"),
        ("train", "train one embedding and write a run directory"),
        ("sweep", "train once per value of kappa or mined_fraction"),
        ("bench", "count distance computations of naive-hard and smart mining"),
        ("eval", "evaluate a checkpoint on a dataset's test split"),
    ]:
        s = sub.add_parser(name, help=text)
        s.add_argument("--config", help="key=value config file")
        s.add_argument("--seed", type=int, help="overrides the config seed")
        s.add_argument("--out", default=".", help="output directory (default: .)")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key; repeatable")
    return p


def _settings(args):
    values = workbench.load_config(args.config) if args.config else {}
    for item in args.set:
        k, v = workbench.parse_override(item)
        values[k] = v
    config, synth, run = workbench.split_config(values)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    return config, synth, run


def _train_data(run, synth, config) -> TrainData:
    ds = workbench.resolve_dataset(run, synth, config.seed)
    return TrainData.from_dataset(ds, float(run.get("validation_fraction", 0.1)))


def _gen_data(args, out: Path) -> str:
    config, synth, run = _settings(args)
    ds = synth.generate(config.seed)
    path = out / ("dataset.bin" if run.get("data.format") == "bin" else "dataset.txt")
    save_dataset(ds, path)
    return f"wrote {len(ds)} rows to {path}"


def _train(args, out: Path) -> str:
    config, synth, run = _settings(args)
    data = _train_data(run, synth, config)
    (out / "config.txt").write_text(workbench.config_to_text(config))
    log = None
    if run.get("log_triplets", "false").lower() in ("1", "true", "yes"):
        def log(epoch, batch, emb):
            mining.write_triplet_log(out / f"triplets_{epoch:03d}.csv", batch, emb)
    ctl = []
    params, records = train(data, config, on_epoch=lambda s, r: ctl.append(s.controller), triplet_log=log)
    write_reports(out / "reports.csv", [r.report for r in records])
    (out / "epochs.csv").write_text(workbench.epoch_table(records))
    if ctl:
        ctl[-1].write_trace(out / "controller.csv")
    save_checkpoint(params, out / "model.ckpt")
    if not records:
        return f"no epochs run; wrote {out}"
    last = records[-1].report
    return f"{len(records)} epochs, final R@1 {last.recall.get(1, float('nan')):.4f} NMI {last.nmi:.4f}; wrote {out}"


def _sweep(args, out: Path) -> str:
    config, synth, run = _settings(args)
    parameter = run.get("sweep.parameter", "kappa")
    if "sweep.values" in run:
        values = [float(v) for v in run["sweep.values"].split(",") if v.strip()]
    else:
        values = workbench.KAPPA_SWEEP if parameter == "kappa" else workbench.MINED_FRACTION_SWEEP
    spec = workbench.SweepSpec(parameter, tuple(values), config)
    results = workbench.run_sweep(spec, _train_data(run, synth, config))
    (out / "sweep.csv").write_text(workbench.sweep_table(spec, results))
    return f"{len(results)} runs; wrote {out / 'sweep.csv'}"


def _bench(args, out: Path) -> str:
    config, _, run = _settings(args)
    sizes = [int(v) for v in run.get("bench.sizes", "1000,2000,4000").split(",") if v.strip()]
    naive = run.get("bench.naive", "true").lower() in ("1", "true", "yes")
    rows = benchmark_mining(sizes, config, per_class=int(run.get("bench.per_class", 50)),
                            kappa=float(run.get("bench.kappa", 1.0)), run_naive=naive)
    lines = [BenchRow.HEADER] + [r.csv_row() for r in rows]
    (out / "bench.csv").write_text("\n".join(lines) + "\n")
    return "\n".join(lines)


def _eval(args, out: Path) -> str:
    config, synth, run = _settings(args)
    if "checkpoint" not in run:
        raise SmartMineError("eval needs checkpoint=<path>")
    params = load_checkpoint(run["checkpoint"])
    data = _train_data(run, synth, config)
    if params.input_dim != data.test_x.shape[1]:
        raise SmartMineError(f"checkpoint expects {params.input_dim}-d inputs, dataset has "
                             f"{data.test_x.shape[1]}")
    report = evaluate_params(params, data, config, 0)
    write_reports(out / "eval.csv", [report])
    return f"{CSV_HEADER}\n{report.csv_row()}"


_COMMANDS = {"gen-data": _gen_data, "train": _train, "sweep": _sweep, "bench": _bench,
             "eval": _eval}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        print(_COMMANDS[args.command](args, out))
    except (SmartMineError, ValueError, ArithmeticError, OSError) as exc:
        print(f"smartmine {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
