"""Command-line entry point: ``ebcsl validate-config`` and ``ebcsl run``."""
from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .baselines import (ForecastModel, OpenLoopPolicy, OracleInfeasible, dp_oracle,
                        evaluate_policy, forecast_baseline, make_deterministic)
from .config import SchemaError, dump_config, load_config, micro_raw, parse_config
from .env import trace_rows, write_trace

log = logging.getLogger("ebcsl")


def _dump_trace(path, record):
    rows = []
    for state, decision, outcome in record:
        rows.extend(trace_rows(state, decision.alloc, outcome))
    write_trace(path, rows)
    return path


def _plots(enabled):
    if not enabled:
        return None
    from . import plots
    return plots


def _run_dir(args, name, mode, seed) -> Path:
    base = Path(args.out)
    d = base / f"{name}-{mode}-seed{seed}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def cmd_validate(args) -> int:
    try:
        run = load_config(args.path)
    except SchemaError as e:
        print(f"{args.path}: invalid", file=sys.stderr)
        for p in e.problems:
            print(f"  - {p}", file=sys.stderr)
        return 2
    s = run.scenario
    print(f"{args.path}: ok ({s.name}: M={s.fleet_size}, N={s.charger_count}, "
          f"T={s.T}, days={s.num_days})")
    return 0


def cmd_example(args) -> int:
    raw = micro_raw(stochastic_traces=args.stochastic, seed=args.seed)
    dump_config(raw, args.path)
    print(args.path)
    return 0


def cmd_run(args) -> int:
    try:
        run = load_config(args.config)
    except SchemaError as e:
        print(f"{args.config}: invalid", file=sys.stderr)
        for p in e.problems:
            print(f"  - {p}", file=sys.stderr)
        return 2
    raw = copy.deepcopy(run.raw)
    seed = args.seed if args.seed is not None else run.training.seed
    raw["seed"] = seed
    raw.setdefault("training", {})
    raw["training"] = dict(raw["training"] or {}, seed=seed)
    if args.iterations is not None:
        raw["training"]["iterations"] = args.iterations
    if args.no_wall_time:
        raw["training"]["record_wall_time"] = False
    episodes = args.episodes if args.episodes is not None else run.eval_episodes
    raw.setdefault("evaluation", {})
    raw["evaluation"] = dict(raw["evaluation"] or {}, episodes=episodes)
    run = parse_config(raw, Path(args.config).parent)
    scenario = run.scenario
    out = _run_dir(args, scenario.name, args.mode, seed)
    dump_config(raw, out / "resolved_config.yaml")
    plots = _plots(not args.no_plots)
    eval_rng = np.random.default_rng([seed, 1])

    if args.mode == "train":
        from .trainer import Trainer
        trainer = Trainer(scenario, run.training)
        trainer.train(run.training.iterations, metrics_path=out / "metrics.csv", ckpt_dir=out,
                      ckpt_every=args.ckpt_every)
        trainer.agent.save(out / f"checkpoint_{trainer.iteration}.bin",
                           meta={"iteration": trainer.iteration,
                                 "lambda_H": trainer.lagrange.lambda_H,
                                 "lambda_L": trainer.lagrange.lambda_L})
        record = []
        report = evaluate_policy(trainer.agent, scenario, episodes, eval_rng, traces=record)
        report.write(out / "eval_report.json")
        _dump_trace(out / "trace_eval.csv", record)
        if plots:
            plots.plot_training(out / "metrics.csv", out / "training.png")
            plots.plot_schedule(out / "trace_eval.csv", out / "schedule_eval.png", scenario.e_min)
    elif args.mode == "eval":
        from .policy import Agent
        if args.checkpoint is None:
            print("--mode eval needs --checkpoint", file=sys.stderr)
            return 2
        tc = run.training
        agent = Agent(scenario, tc.sizes, seed=seed, alloc_mode=tc.alloc_mode,
                      init_log_std=tc.init_log_std, value_scale=tc.value_scale)
        try:
            agent.load(args.checkpoint)
        except (OSError, ValueError) as e:
            print(f"{args.checkpoint}: {e}", file=sys.stderr)
            return 2
        record = []
        report = evaluate_policy(agent, scenario, episodes, eval_rng, traces=record)
        report.write(out / "eval_report.json")
        _dump_trace(out / "trace_eval.csv", record)
        if plots:
            plots.plot_schedule(out / "trace_eval.csv", out / "schedule_eval.png", scenario.e_min)
    elif args.mode == "oracle":
        det = make_deterministic(scenario)
        try:
            res = dp_oracle(det, run.oracle)
        except OracleInfeasible as e:
            (out / "oracle_report.json").write_text(json.dumps({"feasible": False,
                                                                "reason": str(e)}, indent=2))
            print(f"oracle infeasible: {e}", file=sys.stderr)
            return 3
        record = []
        check = evaluate_policy(OpenLoopPolicy(det, res.allocs, res.powers), det, 1, eval_rng,
                                traces=record)
        (out / "oracle_report.json").write_text(json.dumps({
            "feasible": True, "optimal_return": res.value,
            "executed_return": check.avg_operational_return,
            "discretization_slack": res.slack, "horizon": int(res.allocs.shape[0]),
            "allocations": res.allocs.tolist(), "powers": res.powers.tolist(),
            "energy": res.energy.tolist()}, indent=2))
        _dump_trace(out / "trace_oracle.csv", record)
        if plots:
            plots.plot_schedule(out / "trace_oracle.csv", out / "schedule_oracle.png",
                                scenario.e_min)
    else:  # baseline
        fm = ForecastModel.fit(scenario)
        record = []
        try:
            report, plan = forecast_baseline(scenario, fm, run.oracle, episodes, eval_rng,
                                             traces=record)
        except OracleInfeasible as e:
            print(f"forecast plan infeasible: {e}", file=sys.stderr)
            return 3
        report.write(out / "eval_report.json")
        (out / "forecast_plan.json").write_text(json.dumps({
            "planned_return": plan.value,
            "price_intervals": [list(p) for p in fm.price_intervals],
            "allocations": plan.allocs.tolist(), "powers": plan.powers.tolist()}, indent=2))
        _dump_trace(out / "trace_eval.csv", record)
        if plots:
            plots.plot_schedule(out / "trace_eval.csv", out / "schedule_baseline.png",
                                scenario.e_min)
    print(out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ebcsl", description="Electric-bus charging scheduling lab")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate-config", help="check a scenario file against the schema")
    v.add_argument("path")
    v.set_defaults(func=cmd_validate)

    e = sub.add_parser("example-config", help="write the built-in micro scenario")
    e.add_argument("path")
    e.add_argument("--stochastic", action="store_true", help="multi-day noisy traces")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_example)

    r = sub.add_parser("run", help="train, evaluate, solve the oracle or run the baseline")
    r.add_argument("--mode", choices=("train", "eval", "oracle", "baseline"), required=True)
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--episodes", type=int)
    r.add_argument("--out", default="runs")
    r.add_argument("--ckpt-every", type=int, default=0)
    r.add_argument("--iterations", type=int, help="override training.iterations")
    r.add_argument("--checkpoint", help="checkpoint to load for --mode eval")
    r.add_argument("--no-plots", action="store_true")
    r.add_argument("--no-wall-time", action="store_true",
                   help="write wall_ms=0 so metrics files are byte-reproducible")
    r.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
