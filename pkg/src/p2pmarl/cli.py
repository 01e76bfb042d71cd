"""Command-line entry points: train, evaluate, pf-check, market-demo.

Exit status is 0 on success, 1 when a computation fails (non-convergence,
islanding, non-finite metrics) and 2 for invalid input (schema or parse
errors, bad arguments).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, grid, market
from .config import ConfigError, load_scenario, scenario_from_dict
from .sim import HOURS, SimulationError, Simulator, evaluate, latest_checkpoint_step, run_training

log = logging.getLogger("p2pmarl")

LOG_ENV = "P2PMARL_LOG_LEVEL"
MANIFEST = "manifest.json"
EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2


def _setup_logging() -> None:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _config_hash(resolved: dict) -> str:
    return hashlib.sha256(json.dumps(resolved, sort_keys=True).encode()).hexdigest()


def write_manifest(out_dir: Path, resolved: dict, file_hash: str | None, source: str | None) -> Path:
    """Record everything needed to rerun into ``out_dir/manifest.json``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "version": __version__,
        "seed": resolved["seed"],
        "out_dir": str(out_dir.resolve()),
        "config_source": source,
        "config_file_sha256": file_hash,
        "config_sha256": _config_hash(resolved),
        "config": resolved,
    }
    path = out_dir / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _resolve_train_config(args) -> tuple[dict, str | None, str | None]:
    if args.manifest:
        manifest = json.loads(Path(args.manifest).read_text())
        resolved = manifest["config"]
        file_hash, source = manifest.get("config_file_sha256"), manifest.get("config_source")
    else:
        path = Path(args.config) if args.config else None
        scenario, file_hash = load_scenario(path)
        resolved = scenario.to_dict()
        source = str(path) if path else "bundled:scenario_default.json"
    # flags win over file values
    if args.seed is not None:
        resolved["seed"] = args.seed
    if args.episodes is not None:
        resolved["n_episodes"] = args.episodes
    if args.no_p2p:
        resolved["market"]["p2p_enabled"] = False
    if args.paper_literal:
        resolved["market"]["imbalance_enabled"] = False
    if args.checkpoint_every is not None:
        resolved["checkpoint_every"] = args.checkpoint_every
    return resolved, file_hash, source


def cmd_train(args) -> int:
    try:
        resolved, file_hash, source = _resolve_train_config(args)
        scenario = scenario_from_dict(resolved)
    except ConfigError as exc:
        print(f"config error at {exc.path}: {exc.message}", file=sys.stderr)
        return EXIT_INPUT
    except json.JSONDecodeError as exc:
        print(f"config parse error: line {exc.lineno} column {exc.colno}: {exc.msg}", file=sys.stderr)
        return EXIT_INPUT
    out = Path(args.out_dir)
    write_manifest(out, scenario.to_dict(), file_hash, source)
    try:
        history = run_training(Simulator(scenario), out, log_steps=args.log_steps,
                               progress_every=args.progress_every)
    except SimulationError as exc:
        print(f"training halted: {exc} (see {out / 'diagnostic.json'})", file=sys.stderr)
        return EXIT_FAIL
    if history:
        last = history[-1]
        print(f"trained {len(history)} episodes -> {out}")
        print(f"last episode: cost {last.episodic_total_cost:.6g}, "
              f"voltage deviation {last.total_voltage_deviation:.6g} pu, mean price {last.mean_price:.4g}")
    else:
        print(f"no episodes requested; manifest written to {out / MANIFEST}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    run_dir = Path(args.run_dir)
    manifest_path = run_dir / MANIFEST
    if not manifest_path.exists():
        print(f"no {MANIFEST} in {run_dir}", file=sys.stderr)
        return EXIT_INPUT
    try:
        scenario = scenario_from_dict(json.loads(manifest_path.read_text())["config"])
        latest_checkpoint_step(run_dir)
    except ConfigError as exc:
        print(f"config error at {exc.path}: {exc.message}", file=sys.stderr)
        return EXIT_INPUT
    except FileNotFoundError as exc:
        print(f"missing checkpoint: {exc}", file=sys.stderr)
        return EXIT_FAIL
    deterministic = None if not args.stochastic else False
    report = evaluate(scenario, run_dir, n_days=args.days, deterministic=deterministic)
    out = Path(args.out_dir) if args.out_dir else run_dir
    report.write(out)
    prices = report.prices.reshape(args.days, HOURS)
    print("hourly clearing price (cents/kWh)")
    print("day " + " ".join(f"{h:>5d}" for h in range(HOURS)))
    for d, row in enumerate(prices):
        print(f"{d:>3d} " + " ".join(f"{p:5.2f}" for p in row))
    print(f"total voltage deviation {report.deviation.sum():.6g} pu; reports in {out}")
    return EXIT_OK


def cmd_pf_check(args) -> int:
    path = Path(args.network) if args.network else grid.bundled_network_path()
    try:
        net = grid.load_network(path)
    except json.JSONDecodeError as exc:
        print(f"parse error in {path}: line {exc.lineno} column {exc.colno}: {exc.msg}", file=sys.stderr)
        return EXIT_INPUT
    except (grid.NetworkError, OSError) as exc:
        print(f"invalid network {path}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    try:
        grid.check_connected(net)
    except grid.NetworkError as exc:
        print(f"islanding error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    try:
        sol = grid.solve_power_flow(net, np.zeros((net.n_bus, 2)), args.slack_v, args.tol, args.max_iter)
    except grid.SingularJacobianError as exc:
        print(f"power flow failed: {exc}", file=sys.stderr)
        return EXIT_FAIL
    print(f"network {path.name}: {net.n_bus} buses, {len(net.branches)} branches")
    print(f"{'bus':>4} {'name':>6} {'|V| pu':>12} {'angle deg':>12}")
    for b in net.buses:
        print(f"{b.id:>4} {b.name:>6} {sol.v_mag[b.id]:12.8f} {np.degrees(sol.v_ang[b.id]):12.6f}")
    print(f"iterations {sol.iterations}, max residual {sol.mismatch:.3e}")
    if not sol.converged:
        print(f"did not converge within {args.max_iter} iterations", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_market_demo(args) -> int:
    try:
        tariffs = market.Tariffs(args.fit, args.ur)
    except ValueError as exc:
        print(f"invalid tariffs: {exc}", file=sys.stderr)
        return EXIT_INPUT
    bids = [market.Bid(i, q) for i, q in enumerate(args.bids)]
    if args.no_p2p:
        result = market.settle_no_p2p(bids, tariffs)
    else:
        try:
            result = market.settle(bids, tariffs)
        except market.MarketSuspended:
            print("market suspended: no buy bids; all offered energy is sold to the utility at FIT")
            result = market.settle_suspended(bids, tariffs)
    print(f"sdr {result.sdr:.6g}")
    print(f"price {result.price:.6g} cents/kWh")
    print(f"total sell {result.total_sell:.6g} kWh, total buy {result.total_buy:.6g} kWh")
    for b in bids:
        role = "buyer" if b.quantity < 0 else "seller"
        print(f"agent {b.agent_id} {role:>6} bid {b.quantity:+.6g} kWh -> {result.rewards[b.agent_id]:+.6g} cents")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="p2pmarl", description="Peer-to-peer energy market with learning prosumers")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train all prosumer agents")
    p.add_argument("--config", help="scenario JSON (default: bundled scenario)")
    p.add_argument("--manifest", help="rerun from an existing manifest.json")
    p.add_argument("--seed", type=int)
    p.add_argument("--episodes", type=int)
    p.add_argument("--no-p2p", action="store_true", help="baseline: buy at UR, sell at FIT")
    p.add_argument("--paper-literal", action="store_true",
                   help="settle bids only; no charge for deviations from physical delivery")
    p.add_argument("--log-steps", action="store_true", help="also write rounds.csv and steps.csv")
    p.add_argument("--checkpoint-every", type=int, help="checkpoint period in episodes (0: end only)")
    p.add_argument("--progress-every", type=int, default=0, help="log a progress line every N episodes")
    p.add_argument("--out-dir", default="runs/latest")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="roll trained policies forward without learning")
    p.add_argument("run_dir", help="directory written by train")
    p.add_argument("--days", type=int, default=3)
    p.add_argument("--stochastic", action="store_true", help="sample actions instead of using the mean")
    p.add_argument("--out-dir", help="where to write eval CSVs (default: run_dir)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("pf-check", help="solve the base case of a network file")
    p.add_argument("network", nargs="?", help="network JSON (default: bundled 13-bus equivalent)")
    p.add_argument("--slack-v", type=float, default=1.0)
    p.add_argument("--tol", type=float, default=grid.DEFAULT_TOL)
    p.add_argument("--max-iter", type=int, default=grid.DEFAULT_MAX_ITER)
    p.set_defaults(func=cmd_pf_check)

    p = sub.add_parser("market-demo", help="clear one round of bids (positive sell, negative buy)")
    p.add_argument("bids", nargs="+", type=float)
    p.add_argument("--fit", type=float, default=5.0)
    p.add_argument("--ur", type=float, default=14.0)
    p.add_argument("--no-p2p", action="store_true")
    p.set_defaults(func=cmd_market_demo)
    return parser


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "evaluate" and args.days < 1:
        parser.error("--days must be at least 1")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
