"""Command-line entry point.

Every command writes into ``--out`` (one ``seed_<s>`` subdirectory per seed
for the training commands) and exits nonzero with a one-line diagnostic on
failure. Verbosity follows the ``SATNOMA_LOG`` environment variable.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .baselines import (CacheEvaluator, RandomPolicy, exhaustive_cache_oracle, frozen_from_actor,
                        greedy_popularity_cache, nearest_bs_association, placement_count,
                        EXHAUSTIVE_LIMIT)
from .config import (ConfigError, NetworkConfig, TrainConfig, load_config, resolved_dict,
                     save_resolved, tiny_cache_config, train_config_errors,
                     validate_config)
from .env import CacheEnv, CentralizedEnv, ResourceEnv
from .maddpg import (METRIC_FIELDS, DivergenceError, MADDPG, config_hash, evaluate,
                     greedy_actor_policy, load_actors, save_checkpoint, train_cache,
                     train_resource)

logger = logging.getLogger("satnoma")

COMMANDS = ("train-resource", "train-cache", "eval", "oracle-compare", "gradcheck", "selfcheck")
GRADCHECK_TOL = 1e-4
FINAL_WINDOW = 100
# frozen power factor for oracle-compare; at low transmit power the retrieval
# power is a visible share of each user's budget, so placements differ clearly
ORACLE_BETA = 0.005


# -- metrics sink ------------------------------------------------------------------

class MetricsSink:
    """Append-only CSV of per-episode rows; header once, flushed per row."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._fh = open(self.path, "w", newline="")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        self._writer.writerow(METRIC_FIELDS)
        self._fh.flush()
        self.rows = 0

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "MetricsSink":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def _cell(value: Any) -> str:
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    return repr(float(value))


def emit_metrics(sink: MetricsSink, row: dict) -> None:
    """Append one row in header order; floats keep full round-trip precision."""
    sink._writer.writerow([_cell(row[k]) for k in METRIC_FIELDS])
    sink._fh.flush()
    sink.rows += 1


# -- helpers -----------------------------------------------------------------------

def _configure_logging() -> None:
    level = os.environ.get("SATNOMA_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _resolve(args) -> tuple[NetworkConfig, TrainConfig]:
    if args.config:
        net, tc = load_config(args.config)
    elif args.command == "oracle-compare":
        net, tc = tiny_cache_config(), TrainConfig(episodes=150)
    else:
        net, tc = NetworkConfig(), TrainConfig()
    if args.sic:
        net = net.replace(sic_mode=True)
    if args.extended_obs:
        net = net.replace(extended_obs=True)
    if args.episodes is not None:
        tc = tc.replace(episodes=args.episodes)
    if args.steps is not None:
        tc = tc.replace(steps=args.steps)
    validate_config(net, allow_full_cache=getattr(args, "allow_full_cache", False))
    errors = train_config_errors(tc)
    if errors:
        raise ConfigError(errors)
    return net, tc


def _summary(result, started: float, **extra) -> dict:
    window = min(FINAL_WINDOW, len(result.rows)) or 1
    out = {
        "episodes": len(result.rows),
        "final_mean_reward": result.final_mean("mean_reward", window) if result.rows else 0.0,
        "final_hit_rate": result.final_mean("hit_rate", window) if result.rows else 0.0,
        "violations": result.violations,
        "runtime_s": round(time.perf_counter() - started, 3),
    }
    out.update(extra)
    return out


def _write_json(path: Path, data: dict) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _cache_pools(env: CacheEnv, trainer: MADDPG) -> list[frozenset[int]]:
    """Placement a trained cache policy settles on (noise-free rollout, last slot)."""
    obs = env.reset(0)
    for _ in range(env.episode_length):
        res = env.step(trainer.select_action(obs, 0.0))
        obs = res.obs
        if res.done:
            break
    return list(env.state.pools)


# -- per-seed jobs -------------------------------------------------------------------

def _run_resource(net: NetworkConfig, tc: TrainConfig, out: Path, pools=None,
                  metrics_name: str = "metrics.csv"):
    env = ResourceEnv(net, pools=pools)
    with MetricsSink(out / metrics_name) as sink:
        result = train_resource(env, tc, on_episode=lambda row: emit_metrics(sink, row))
    return env, result


def job_train_resource(net: NetworkConfig, tc: TrainConfig, out: Path) -> dict:
    started = time.perf_counter()
    out.mkdir(parents=True, exist_ok=True)
    save_resolved(out / "config.resolved.json", net, tc)
    resolved = resolved_dict(net, tc)
    _, result = _run_resource(net, tc, out)
    save_checkpoint(result.trainer, out / "checkpoint", episode=tc.episodes, resolved=resolved,
                    rng_state=result.rng_state)
    summary = _summary(result, started, command="train-resource", seed=tc.seed,
                       config_hash=config_hash(resolved))
    _write_json(out / "summary.json", summary)
    return summary


def job_train_cache(net: NetworkConfig, tc: TrainConfig, out: Path, *,
                    resource_from: str | None = None, rounds: int = 1) -> dict:
    """Resource training, freeze association and power, then cache training.

    ``rounds > 1`` repeats the pair, retraining the resource stage with the
    previous round's cache pools installed.
    """
    started = time.perf_counter()
    out.mkdir(parents=True, exist_ok=True)
    save_resolved(out / "config.resolved.json", net, tc)
    resolved = resolved_dict(net, tc)
    pools = None
    for rnd in range(rounds):
        tag = "" if rounds == 1 else f"_round{rnd}"
        if resource_from is not None and rnd == 0:
            env = ResourceEnv(net)
            actors = load_actors(resource_from)
            trainer = MADDPG.for_env(env, tc, np.random.default_rng(0))
            if actors.theta.shape != trainer.actor.theta.shape:
                raise ValueError("checkpoint does not match the configured network")
            trainer.actor.theta[...] = actors.theta
        else:
            env, res_result = _run_resource(net, tc, out, pools, f"resource_metrics{tag}.csv")
            trainer = res_result.trainer
            save_checkpoint(trainer, out / f"resource_checkpoint{tag}", episode=tc.episodes,
                            resolved=resolved, rng_state=res_result.rng_state)
        env.episode_length = tc.steps
        facility, beta = frozen_from_actor(env, trainer, seed=tc.seed)
        cache_env = CacheEnv(net, facility, beta)
        with MetricsSink(out / f"metrics{tag}.csv") as sink:
            result = train_cache(cache_env, tc, on_episode=lambda row: emit_metrics(sink, row))
        save_checkpoint(result.trainer, out / f"checkpoint{tag}", episode=tc.episodes,
                        resolved=resolved, rng_state=result.rng_state)
        cache_env.episode_length = tc.steps
        pools = _cache_pools(cache_env, result.trainer)
    summary = _summary(result, started, command="train-cache", seed=tc.seed, rounds=rounds,
                       config_hash=config_hash(resolved),
                       facility=[int(f) for f in facility], beta=[float(b) for b in beta],
                       pools=[sorted(int(u) for u in p) for p in pools])
    _write_json(out / "summary.json", summary)
    return summary


def job_eval(net: NetworkConfig, tc: TrainConfig, out: Path, *, policy: str,
             checkpoint: str | None) -> dict:
    started = time.perf_counter()
    out.mkdir(parents=True, exist_ok=True)
    save_resolved(out / "config.resolved.json", net, tc)
    env = ResourceEnv(net)
    if policy == "random":
        fn = RandomPolicy(env)
    elif policy == "nearest":
        facility, beta = nearest_bs_association(net, env.topology)
        raw = np.zeros((env.num_agents, env.act_dim))
        raw[facility >= 0, facility[facility >= 0]] = 1.0
        raw[facility < 0, 0] = 1.0
        raw[:, -1] = beta
        fn = lambda obs, rng: raw
    else:
        if checkpoint is None:
            raise ValueError("--policy checkpoint needs --checkpoint DIR")
        trainer = MADDPG.for_env(env, tc, np.random.default_rng(0))
        actors = load_actors(checkpoint)
        if actors.theta.shape != trainer.actor.theta.shape:
            raise ValueError("checkpoint does not match the configured network")
        trainer.actor.theta[...] = actors.theta
        fn = greedy_actor_policy(trainer)
    result = evaluate(env, fn, tc.episodes, tc.steps, tc.seed)
    with MetricsSink(out / "metrics.csv") as sink:
        for row in result.rows:
            emit_metrics(sink, row)
    summary = _summary(result, started, command="eval", policy=policy, seed=tc.seed)
    _write_json(out / "summary.json", summary)
    return summary


def job_oracle_compare(net: NetworkConfig, tc: TrainConfig, out: Path) -> dict:
    """Learned cache placement against greedy popularity and exhaustive search."""
    started = time.perf_counter()
    out.mkdir(parents=True, exist_ok=True)
    save_resolved(out / "config.resolved.json", net, tc)
    capacities = [net.cache_capacity_of(f) for f in range(net.num_facilities)]
    if placement_count(net.library_size, capacities) > EXHAUSTIVE_LIMIT:
        raise ValueError("instance too large for exhaustive search")
    probe = ResourceEnv(net)
    facility, beta = nearest_bs_association(net, probe.topology, beta=ORACLE_BETA)
    env = CacheEnv(net, facility, beta)
    with MetricsSink(out / "metrics.csv") as sink:
        result = train_cache(env, tc, on_episode=lambda row: emit_metrics(sink, row))
    env.episode_length = tc.steps
    learned = tuple(_cache_pools(env, result.trainer))
    evaluator = CacheEvaluator(env)
    oracle = exhaustive_cache_oracle(evaluator, net.library_size, capacities)
    oracle.write_csv(out / "oracle.csv")
    greedy = tuple(greedy_popularity_cache(env.popularity, c) for c in capacities)
    summary = _summary(
        result, started, command="oracle-compare", seed=tc.seed,
        learned_placement=[sorted(p) for p in learned],
        oracle_placement=[sorted(p) for p in oracle.placement],
        greedy_placement=[sorted(p) for p in greedy],
        learned_value=evaluator(learned), oracle_value=oracle.value, greedy_value=evaluator(greedy),
        learned_hit_rate=evaluator.expected_hit_rate(learned),
        oracle_hit_rate=evaluator.expected_hit_rate(oracle.placement),
        greedy_hit_rate=evaluator.expected_hit_rate(greedy),
    )
    summary["hit_rate_gap"] = summary["oracle_hit_rate"] - summary["learned_hit_rate"]
    _write_json(out / "summary.json", summary)
    print(f"learned  {summary['learned_placement']}  value {summary['learned_value']:.6g}  "
          f"hit rate {summary['learned_hit_rate']:.4f}")
    print(f"oracle   {summary['oracle_placement']}  value {summary['oracle_value']:.6g}  "
          f"hit rate {summary['oracle_hit_rate']:.4f}")
    print(f"greedy   {summary['greedy_placement']}  value {summary['greedy_value']:.6g}  "
          f"hit rate {summary['greedy_hit_rate']:.4f}")
    print(f"gap (oracle - learned hit rate) {summary['hit_rate_gap']:.4f}")
    return summary


# -- checks --------------------------------------------------------------------------

def used_net_shapes(net: NetworkConfig, tc: TrainConfig) -> list[tuple[str, tuple, tuple, list | None]]:
    """(name, layer sizes, head, top-k) of every per-agent network the trainers build."""
    hidden = tuple(tc.hidden)
    probe = ResourceEnv(net)
    facility = np.full(net.num_users, -1)
    shapes = []
    for label, env in (("resource", probe), ("cache", CacheEnv(net, facility, np.zeros(net.num_users)))):
        n, od, ad = env.num_agents, env.obs_dim, env.act_dim
        central = CentralizedEnv(env)
        for i, k in enumerate(env.topk or [None]):
            suffix = f" {i}" if env.topk is not None and len(env.topk) > 1 else ""
            shapes.append((f"{label} actor{suffix}", (od, *hidden, ad), env.head, None if k is None else [k]))
        shapes.append((f"{label} critic", (n * (od + ad), *hidden, 1), None, None))
        shapes.append((f"{label} central actor", (n * od, *hidden, n * ad), central.head, central.topk))
        shapes.append((f"{label} central critic", (n * (od + ad), *hidden, 1), None, None))
    return shapes


def run_gradcheck(net: NetworkConfig, tc: TrainConfig, seed: int = 0,
                  report=print) -> float:
    from .neural import DenseNet, gradient_check

    rng = np.random.default_rng(seed)
    worst = 0.0
    seen = set()
    for name, sizes, head, topk in used_net_shapes(net, tc):
        key = (sizes, head, None if topk is None else str(topk))
        if key in seen:
            continue
        seen.add(key)
        dnet = DenseNet(sizes, "relu", head, 1, rng, topk=topk)
        x = rng.standard_normal((1, 2, sizes[0]))
        err = gradient_check(dnet, x, rng)
        worst = max(worst, err)
        report(f"{'ok  ' if err < GRADCHECK_TOL else 'FAIL'} {name} {sizes}: max rel err {err:.3e}")
    return worst


def run_selfcheck(report=print) -> bool:
    """Fast invariant sweep; True when everything passes."""
    from .caching import zipf_pmf
    from .channel import bessel_j, sat_beam_gain
    from .maddpg import ReplayBuffer, train
    from .neural import Adam, DenseNet, gradient_check

    checks = []

    def check(name, ok, detail=""):
        checks.append(bool(ok))
        report(f"{'ok  ' if ok else 'FAIL'} {name}{': ' + detail if detail else ''}")

    worst = max(abs(zipf_pmf(u, e).pmf.sum() - 1.0)
                for u in (1, 3, 40, 1000) for e in (0.56, 0.83, 1.0))
    check("zipf normalization", worst < 1e-12, f"{worst:.2e}")
    g = sat_beam_gain(1e-9, 0.07, 1000.0)
    check("boresight gain", abs(g - 1000.0) / 1000.0 < 1e-6, f"{g!r}")
    res = max(abs(bessel_j(0, x) + bessel_j(2, x) - 2 * bessel_j(1, x) / x)
              for x in np.linspace(0.1, 20, 60))
    check("bessel recurrence", res < 1e-10, f"{res:.2e}")
    rng = np.random.default_rng(0)
    err = gradient_check(DenseNet((3, 8, 8, 4), "relu", (("tanh", 3), ("sigmoid", 1)), 1, rng),
                         rng.standard_normal((1, 4, 3)), rng)
    check("gradcheck small net", err < GRADCHECK_TOL, f"{err:.2e}")
    p = np.zeros((1, 1))
    Adam(p.shape).step(p, np.array([[3.0]]))
    check("adam first step", abs(abs(p[0, 0]) - 1e-3) < 1e-9, f"{float(p[0, 0])!r}")
    buf = ReplayBuffer(2, 1, 1, 1)
    for v in (1.0, 2.0, 3.0):
        buf.push([[v]], [[v]], [v], [[v]])
    kept = sorted(float(t[2][0]) for t in buf.transitions())
    check("replay FIFO", kept == [2.0, 3.0], str(kept))
    net = tiny_cache_config(zipf_exponent=0.8)
    tc = TrainConfig(episodes=3, steps=20, seed=5)
    a = train(ResourceEnv(net), tc).rows
    b = train(ResourceEnv(net), tc).rows
    check("determinism", a == b)
    env = ResourceEnv(net)
    evaluate(env, RandomPolicy(env), 3, 20, 1)
    check("constraints under random play", not env.violations, f"{len(env.violations)} violations")
    return all(checks)


# -- argument parsing ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="satnoma", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seeds=True):
        p.add_argument("--config", help="JSON config file (network and train sections)")
        p.add_argument("--out", default="runs", help="output directory (default: runs)")
        if seeds:
            p.add_argument("--seed", type=int, action="append", dest="seeds",
                           help="run seed; repeat for several (default: the config's seed)")
            p.add_argument("--workers", type=int, default=1,
                           help="parallel worker processes across seeds (default 1)")
        p.add_argument("--episodes", type=int)
        p.add_argument("--steps", type=int)
        p.add_argument("--sic", action="store_true", help="successive interference cancellation")
        p.add_argument("--extended-obs", action="store_true",
                       help="append the previous reward to each observation")

    common(sub.add_parser("train-resource", help="train user association and power control"))
    p = sub.add_parser("train-cache", help="train resources, then cache placement on the frozen result")
    common(p)
    p.add_argument("--resource-from", metavar="DIR",
                   help="skip stage 1 and load resource actors from a checkpoint directory")
    p.add_argument("--rounds", type=int, default=1,
                   help="repeat both stages, feeding learned pools back (extension; default 1)")
    p = sub.add_parser("eval", help="roll out a fixed resource policy")
    common(p)
    p.add_argument("--policy", choices=("random", "nearest", "checkpoint"), default="random")
    p.add_argument("--checkpoint", metavar="DIR")
    common(sub.add_parser("oracle-compare",
                          help="learned vs greedy vs exhaustive caching (tiny instance by default)"))
    common(sub.add_parser("gradcheck", help="finite-difference check of every network shape"),
           seeds=False)
    sub.add_parser("selfcheck", help="fast invariant sweep")
    return parser


def _seed_jobs(args, net: NetworkConfig, tc: TrainConfig):
    seeds = args.seeds or [tc.seed]
    if len(set(seeds)) != len(seeds):
        raise ValueError("duplicate --seed values")
    out = Path(args.out)
    jobs = []
    for s in seeds:
        kwargs = {}
        if args.command == "train-resource":
            fn = job_train_resource
        elif args.command == "train-cache":
            fn = job_train_cache
            kwargs = {"resource_from": args.resource_from, "rounds": args.rounds}
        elif args.command == "eval":
            fn = job_eval
            kwargs = {"policy": args.policy, "checkpoint": args.checkpoint}
        else:
            fn = job_oracle_compare
        jobs.append((fn, tc.replace(seed=s), out / f"seed_{s}", kwargs))
    return jobs


def run(args) -> int:
    if args.command == "selfcheck":
        started = time.perf_counter()
        ok = run_selfcheck()
        print(f"selfcheck {'passed' if ok else 'FAILED'} in {time.perf_counter() - started:.1f} s")
        return 0 if ok else 1
    net, tc = _resolve(args)
    if args.command == "gradcheck":
        worst = run_gradcheck(net, tc)
        print(f"worst relative error {worst:.3e} (tolerance {GRADCHECK_TOL:g})")
        return 0 if worst < GRADCHECK_TOL else 1
    if getattr(args, "rounds", 1) < 1:
        raise ValueError("--rounds must be >= 1")
    jobs = _seed_jobs(args, net, tc)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    if args.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            futures = [pool.submit(fn, net, t, out, **kw) for fn, t, out, kw in jobs]
            summaries = [f.result() for f in futures]
    else:
        summaries = [fn(net, t, out, **kw) for fn, t, out, kw in jobs]
    for s in summaries:
        print(f"seed {s['seed']}: final mean reward {s['final_mean_reward']:.6g}, "
              f"hit rate {s['final_hit_rate']:.4f}, violations {s['violations']}, "
              f"{s['runtime_s']:.1f} s")
    return 1 if any(s["violations"] for s in summaries) else 0


def main(argv: Sequence[str] | None = None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except ConfigError as exc:
        print(f"satnoma: invalid config: {'; '.join(exc.errors)}", file=sys.stderr)
    except DivergenceError as exc:
        print(f"satnoma: training diverged: {exc}", file=sys.stderr)
    except (OSError, ValueError, KeyError) as exc:
        print(f"satnoma: error: {exc}", file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
