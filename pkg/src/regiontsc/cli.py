"""Command-line entry point: partition, simulate, train, evaluate."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from .agent import AgentConfig
from .harness import (
    ExperimentConfig,
    RegionalController,
    build_flow,
    build_network,
    build_regions,
    evaluate,
    load_agent,
    make_controller,
    train,
)
from .net import NetworkError, load_roadnet
from .partition import (
    PartitionError,
    SolveStats,
    SolverTimeout,
    assignment_order,
    configuration_to_dict,
    construct_regions,
    solve_min_dominating_set,
)
from .sim import SimConfig, SimError, SimInvariantError, load_flow

EXIT_INPUT, EXIT_TIMEOUT, EXIT_INVARIANT, EXIT_IO = 3, 4, 5, 6


def _write_json(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")


def _summary_line(name: str, ev: dict) -> str:
    def fmt(key):
        s = ev[key]
        return "n/a" if s is None else f"{s['mean']:.3f}±{s['std']:.3f}"

    return f"{name}: reward {fmt('reward')} att {fmt('att')} aql {fmt('aql')} tp {fmt('tp')}"


def cmd_partition(args) -> int:
    net = load_roadnet(args.net)
    stats: list[SolveStats] = []
    w = solve_min_dominating_set(net, time_limit=args.time_limit, stats=stats)
    centers, nbrs = assignment_order(net, w, args.seed)
    config = construct_regions(net, w, centers, nbrs)
    data = configuration_to_dict(config)
    st = stats[0]
    print(f"dominating set size {st.size} ({'certified' if st.certified else 'uncertified'}, "
          f"{st.nodes} nodes, {st.seconds:.3f}s); {len(config.regions)} regions")
    if args.out:
        _write_json(Path(args.out), data)
    else:
        print(json.dumps(data, indent=1))
    return 0


def cmd_simulate(args) -> int:
    net = load_roadnet(args.net)
    flow = load_flow(args.flow)
    sim_cfg = SimConfig(seed=args.seed)
    controller = make_controller(args.controller, seed=args.seed)
    ev = evaluate(controller, net, flow, sim_cfg, args.episodes, base_seed=args.seed)
    out = Path(args.out)
    _write_json(out / "metrics.json", {"controller": args.controller, **ev})
    print(_summary_line(args.controller, ev))
    return 0


def _load_config(path: str) -> tuple[ExperimentConfig, Path]:
    p = Path(path)
    return ExperimentConfig.load(p), p.resolve().parent


def cmd_train(args) -> int:
    cfg, base = _load_config(args.config)
    cfg.out_dir = str(args.out)
    if args.episodes is not None:
        cfg.episodes = args.episodes
    result = train(cfg, base)
    if result.records:
        last = result.records[-1]
        print(f"trained {len(result.records)} episodes; last reward {last.reward:.2f} aql {last.aql:.3f}")
    else:
        print("0 episodes: wrote partition and empty log")
    return 0


def cmd_evaluate(args) -> int:
    cfg, base = _load_config(args.config)
    net = build_network(cfg.network, base)
    flow = build_flow(cfg.flow, base)
    sim_cfg = SimConfig(**cfg.sim)
    regions = build_regions(net, cfg.partition)
    agent = load_agent(args.checkpoint, AgentConfig.from_dict({"seed": cfg.seed, **cfg.agent}))
    results = {"abdq": evaluate(RegionalController(agent, regions, 0.0), net, flow, sim_cfg,
                                args.episodes, cfg.seed)}
    for name in args.baselines:
        results[name] = evaluate(make_controller(name, cfg.seed), net, flow, sim_cfg, args.episodes, cfg.seed)
    out = Path(args.out) if args.out else Path(args.checkpoint).resolve().parent / "eval.json"
    _write_json(out, {"episodes": args.episodes, "sim": asdict(sim_cfg), "results": results})
    for name, ev in results.items():
        print(_summary_line(name, ev))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="regiontsc", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-episode progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("partition", help="solve the dominating set and build star regions")
    p.add_argument("--net", required=True)
    p.add_argument("--seed", type=int, default=None, help="shuffle the assignment order")
    p.add_argument("--time-limit", type=float, default=60.0)
    p.add_argument("--out", help="write regions JSON here instead of stdout")
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("simulate", help="run a baseline controller")
    p.add_argument("--net", required=True)
    p.add_argument("--flow", required=True)
    p.add_argument("--controller", choices=["fixed", "maxpressure", "random"], required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--episodes", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train the regional agent")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--episodes", type=int, default=None, help="override the configured count")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint greedily")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--baselines", nargs="*", default=[], choices=["fixed", "maxpressure", "random"])
    p.add_argument("--out", help="eval JSON path (default: eval.json beside the checkpoint)")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SolverTimeout as exc:
        print(f"error [timeout]: {exc}; best set found: {sorted(exc.incumbent)}", file=sys.stderr)
        return EXIT_TIMEOUT
    except SimInvariantError as exc:
        print(f"error [invariant]: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (NetworkError, PartitionError, SimError, KeyError, ValueError) as exc:
        print(f"error [input]: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error [io]: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
