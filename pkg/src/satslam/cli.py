"""Command-line entry point: ``satslam {recon,plan,run,metrics,export-plot}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from satslam.graph import estimate_to_dict
from satslam.harness import (
    ExperimentConfig,
    child_rng,
    export_plot_csvs,
    load_records,
    plan_active,
    run_experiment,
    write_aggregates,
)
from satslam.scene import generate_scene, run_reconnaissance, save_scene

log = logging.getLogger("satslam")

_RECON, _PLANNER = 0, 1


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    d = json.loads(Path(args.config).read_text()) if args.config else {}
    if args.seed is not None:
        d["master_seed"] = args.seed
    if args.output_dir is not None:
        d["output_dir"] = args.output_dir
    if args.horizon:
        d["horizons"] = args.horizon
    if args.strategy:
        d["strategies"] = args.strategy
    if getattr(args, "workers", None):
        d["workers"] = args.workers
    return ExperimentConfig.from_dict(d)


def _recon(cfg: ExperimentConfig, plan_id: int):
    return run_reconnaissance(generate_scene(cfg.scene), cfg.orbit, cfg.s0, cfg.camera,
                              np.array(cfg.recon_target), child_rng(cfg.master_seed, plan_id, _RECON),
                              cfg.attitude_noise_sigma, pixel_noise=cfg.pixel_noise)


def cmd_recon(cfg: ExperimentConfig, args) -> int:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rec = _recon(cfg, args.plan_id)
    (out / f"recon_graph_plan{args.plan_id:02d}.json").write_text(rec.graph.to_json())
    (out / f"recon_estimate_plan{args.plan_id:02d}.json").write_text(json.dumps(estimate_to_dict(rec.estimate)))
    save_scene(rec.scene, out / "scene.json")
    print(json.dumps({"plan_id": args.plan_id, "poses": len(rec.graph.keys("pose")),
                      "landmarks": len(rec.map_ids), "factors": len(rec.graph.factors),
                      "output_dir": str(out)}))
    return 0


def cmd_plan(cfg: ExperimentConfig, args) -> int:
    rec = _recon(cfg, args.plan_id)
    L = cfg.horizons[0]
    res = plan_active(rec.graph, rec.estimate, rec.final_state, cfg.planner(L), cfg.camera,
                      child_rng(cfg.master_seed, args.plan_id, _PLANNER, L), cfg.orbit)
    print(json.dumps({
        "plan_id": args.plan_id,
        "horizon": L,
        "candidates": [np.asarray(c.target).tolist() for c in res.candidates],
        "rewards": [r if np.isfinite(r) else None for r in map(float, res.rewards)],
        "best_index": res.best_index,
        "target": np.asarray(res.target).tolist(),
    }, indent=1))
    return 0


def _summary(tables: dict) -> str:
    lines = [f"{'strategy':8s} {'L':>3s} {'U_r[end]':>12s} {'e_r[end]':>12s} {'U_phi[end]':>12s} "
             f"{'e_phi[end]':>12s} {'c[end]':>7s} {'ok':>4s} {'failed':>6s}"]
    for (s, L), t in sorted(tables.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        st = t.steps
        lines.append(f"{s:8s} {L:3d} {st['U_r'][-1]:12.5g} {st['e_r'][-1]:12.5g} {st['U_phi'][-1]:12.5g} "
                     f"{st['e_phi'][-1]:12.5g} {st['coverage'][-1]:7.3f} {t.n_records:4d} {t.n_failed:6d}")
    return "\n".join(lines)


def cmd_run(cfg: ExperimentConfig, args) -> int:
    tables, records = run_experiment(cfg)
    print(_summary(tables))
    return 0


def cmd_metrics(cfg: ExperimentConfig, args) -> int:
    out = Path(cfg.output_dir)
    records = load_records(out)
    if not records:
        print(f"no records under {out / 'records'}", file=sys.stderr)
        return 1
    horizons = sorted({r.horizon for r in records})
    strategies = [s for s in cfg.strategies if any(r.strategy == s for r in records)]
    print(_summary(write_aggregates(out, records, horizons, strategies)))
    return 0


def cmd_export_plot(cfg: ExperimentConfig, args) -> int:
    out = Path(cfg.output_dir)
    records = load_records(out)
    if not records:
        print(f"no records under {out / 'records'}", file=sys.stderr)
        return 1
    for p in export_plot_csvs(out, records, args.error_scale):
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment configuration JSON")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--output-dir", help="directory for records and tables")
    common.add_argument("--horizon", type=int, action="append", help="planning horizon (repeatable)")
    common.add_argument("--strategy", action="append", choices=["tau1", "tau2", "active"],
                        help="strategy to run (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="satslam", description="Active SLAM for satellite inspection")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("recon", parents=[common], help="build and serialize the reconnaissance graph")
    r.add_argument("--plan-id", type=int, default=1)
    r.set_defaults(func=cmd_recon)
    r = sub.add_parser("plan", parents=[common], help="print candidate rewards and the chosen target")
    r.add_argument("--plan-id", type=int, default=1)
    r.set_defaults(func=cmd_plan)
    r = sub.add_parser("run", parents=[common], help="run the full Monte-Carlo experiment")
    r.add_argument("--workers", type=int, help="worker processes (one plan id per task)")
    r.set_defaults(func=cmd_run)
    r = sub.add_parser("metrics", parents=[common], help="recompute aggregates from stored records")
    r.set_defaults(func=cmd_metrics)
    r = sub.add_parser("export-plot", parents=[common], help="write per-figure CSV files")
    r.add_argument("--error-scale", type=float, default=1.0,
                   help="multiply plotted errors (the figures use 50)")
    r.set_defaults(func=cmd_export_plot)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not args.verbose:
        warnings.simplefilter("ignore", RuntimeWarning)
    try:
        cfg = load_config(args)
    except (OSError, ValueError, TypeError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return 2
    return args.func(cfg, args)


if __name__ == "__main__":
    sys.exit(main())
