"""Command-line entry point: dataset generation, offline training, steered
evaluation, ablation sweeps, timing profiles, and report consolidation.

Flags may be preloaded from a flat ``key = value`` config file via
``--config``; explicit flags win over file values.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench, figures
from .data import load_dataset, save_dataset
from .offline import CriticScorer, TrainConfig, TrainedArtifacts, train
from .rerank import SteeringConfig
from .worlds import (
    GRID_FLAVORS,
    POINT_FLAVORS,
    GridPickPlace,
    PointMassPlace,
    ScriptedGridPolicy,
    ScriptedPointPolicy,
    generate_dataset,
    mixed_flawed_policy,
)

log = logging.getLogger(__name__)


def make_env(name: str):
    if name == "grid":
        return GridPickPlace()
    if name == "grid3":
        return GridPickPlace(n=3, containers=((0, 1), (0, 2)), p_slip=0.0)
    if name == "point":
        return PointMassPlace()
    raise SystemExit(f"unknown environment {name!r} (grid, grid3, point)")


def make_policy(env, flavor: str):
    if isinstance(env, GridPickPlace):
        if flavor not in GRID_FLAVORS:
            raise SystemExit(f"unknown grid policy flavor {flavor!r}")
        if flavor == "mixed":
            return mixed_flawed_policy(env)
        return ScriptedGridPolicy(env, flavor=flavor)
    if flavor not in POINT_FLAVORS:
        raise SystemExit(f"unknown point policy flavor {flavor!r}")
    return ScriptedPointPolicy(env, flavor=flavor)


def parse_seeds(text: str) -> list[int]:
    return [int(s) for s in text.split(",") if s.strip() != ""]


def parse_int_list(text: str) -> list[int]:
    return [int(s) for s in text.split(",") if s.strip() != ""]


def load_artifacts(prefix: str) -> TrainedArtifacts:
    return TrainedArtifacts.load(prefix)


def build_scorer(art: TrainedArtifacts, env) -> CriticScorer:
    if art.critics is None:
        raise SystemExit(f"checkpoint {art.algorithm!r} has no critics to score with")
    return CriticScorer(art.critics, art.embeddings, art.action_space, env.observe)


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    env = make_env(args.env)
    policy = make_policy(env, args.policy)
    rng = np.random.default_rng(args.seed)
    dataset = generate_dataset(env, [(policy, 1.0)], args.n_trajectories,
                               horizon=args.horizon, gamma=args.gamma, rng=rng,
                               t_max=args.t_max, seed_label=args.seed)
    save_dataset(dataset, args.out)
    print(f"wrote {dataset.manifest.n_trajectories} trajectories "
          f"({dataset.manifest.n_transitions} transitions, "
          f"success rate {dataset.success_rate:.3f}) to {args.out}")
    return 0


def cmd_train(args) -> int:
    dataset = load_dataset(args.dataset)
    config = TrainConfig(
        algorithm=args.algorithm, alpha=args.alpha, expectile=args.expectile,
        gamma=dataset.manifest.gamma, learning_rate=args.learning_rate,
        batch_size=args.batch_size, total_steps=args.steps,
        hidden_dims=tuple(parse_int_list(args.hidden_dims)),
        train_actor=not args.no_actor, seed=args.seed)
    art = train(dataset, config)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    art.save(args.out)
    if art.curve and not args.no_figures:
        figures.training_curve(art.curve, f"{args.out}.curve.png")
    print(f"trained {args.algorithm} for {args.steps} steps -> {args.out}.ckpt.npz")
    return 0


def cmd_eval(args) -> int:
    env = make_env(args.env)
    policy = make_policy(env, args.policy)
    art = load_artifacts(args.checkpoint)
    scorer = build_scorer(art, env)
    tasks = sorted(env.task_table)
    seeds = parse_seeds(args.seeds)
    steering = SteeringConfig(num_candidates=args.k, beta=args.beta)
    steered = bench.evaluate(env, policy, tasks, args.episodes, seeds,
                             scorer=scorer, steering=steering,
                             label=f"steered-k{args.k}",
                             experiment_tag=args.tag, t_max=args.t_max)
    baseline = bench.evaluate(env, policy, tasks, args.episodes, seeds,
                              label="baseline", experiment_tag=args.tag,
                              t_max=args.t_max)
    merged = bench.EvalReport(rows=baseline.rows + steered.rows,
                              flagged=baseline.flagged or steered.flagged)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    merged.to_csv(args.out)
    for row in bench.improvement_rows(steered, baseline, tasks):
        print(f"task {row['task_id']}: baseline {row['baseline_rate']:.3f} -> "
              f"steered {row['steered_rate']:.3f} "
              f"({row['improvement_abs']:+.3f} absolute)")
    if merged.flagged:
        print("evaluation FLAGGED: too many invalid episodes", file=sys.stderr)
        return 1
    return 0


def cmd_sweep(args) -> int:
    env = make_env(args.env)
    policy = make_policy(env, args.policy)
    art = load_artifacts(args.checkpoint)
    scorer = build_scorer(art, env)
    arms = [{"label": "baseline", "policy": policy, "experiment_tag": args.tag}]
    for k in parse_int_list(args.k_list):
        arms.append({"label": f"steered-k{k}", "policy": policy, "scorer": scorer,
                     "steering": SteeringConfig(num_candidates=k, beta=args.beta),
                     "experiment_tag": args.tag})
    rep = bench.sweep(arms, env, sorted(env.task_table), args.episodes,
                      parse_seeds(args.seeds), t_max=args.t_max)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    rep.to_csv(args.out)
    print(f"wrote {len(rep.rows)} rows to {args.out}")
    return 1 if rep.flagged else 0


def cmd_timing(args) -> int:
    env = make_env(args.env)
    policy = make_policy(env, args.policy)
    art = load_artifacts(args.checkpoint)
    scorer = build_scorer(art, env)
    frame = bench.timing_profile(env, policy, scorer, task_id=args.task,
                                 k_list=parse_int_list(args.k_list),
                                 n_decisions=args.decisions, seed=args.seed)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(args.out, index=False)
    if not args.no_figures:
        figures.timing_curve(frame.to_dict("records"),
                             str(Path(args.out).with_suffix(".png")))
    print(frame.to_string(index=False))
    return 0


def cmd_report(args) -> int:
    merged = bench.report(args.run_dir, output_path=args.out,
                          figures=not args.no_figures)
    print(f"merged {len(merged)} rows")
    invalid = merged["invalid_count"].sum() if "invalid_count" in merged else 0
    episodes = merged["n_episodes"].sum() if "n_episodes" in merged else 0
    if episodes and invalid > 0.01 * episodes:
        print("report FLAGGED: too many invalid episodes", file=sys.stderr)
        return 1
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vsteer",
        description="Offline critic training and test-time action re-ranking.")
    parser.add_argument("--config", help="flat key = value config file; "
                        "values become flag defaults")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="roll out a scripted policy into a dataset")
    p.add_argument("--env", default="grid")
    p.add_argument("--policy", default="mixed")
    p.add_argument("--n-trajectories", type=int, default=600)
    p.add_argument("--horizon", type=int, default=3)
    p.add_argument("--gamma", type=float, default=0.98)
    p.add_argument("--t-max", type=int, default=60)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train an offline critic/actor")
    p.add_argument("--dataset", required=True)
    p.add_argument("--algorithm", default="calql",
                   choices=["calql", "cql", "iql", "sarsa", "bc"])
    p.add_argument("--steps", type=int, default=15_000)
    p.add_argument("--alpha", type=float, default=5.0)
    p.add_argument("--expectile", type=float, default=0.7)
    p.add_argument("--learning-rate", type=float, default=3e-4)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--hidden-dims", default="64,64")
    p.add_argument("--no-actor", action="store_true")
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint path prefix")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="paired baseline vs steered evaluation")
    p.add_argument("--env", default="grid")
    p.add_argument("--policy", default="mixed")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--k", type=int, default=50)
    p.add_argument("--beta", type=float, default=0.0)
    p.add_argument("--episodes", type=int, default=500)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--t-max", type=int, default=60)
    p.add_argument("--tag", default="steering")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="candidate-count ablation with shared seeds")
    p.add_argument("--env", default="grid")
    p.add_argument("--policy", default="mixed")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--k-list", default="10,30,50,100")
    p.add_argument("--beta", type=float, default=0.0)
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--t-max", type=int, default=60)
    p.add_argument("--tag", default="k-ablation")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("timing", help="per-decision latency profile")
    p.add_argument("--env", default="grid")
    p.add_argument("--policy", default="mixed")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--k-list", default="1,10,30,50,100")
    p.add_argument("--decisions", type=int, default=200)
    p.add_argument("--task", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_timing)

    p = sub.add_parser("report", help="merge run CSVs into one report")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def apply_config_file(parser, argv):
    """Use config-file entries as defaults for the chosen subcommand."""
    if "--config" not in argv:
        return argv
    i = argv.index("--config")
    values = bench.parse_config(argv[i + 1])
    flags = []
    for key, value in values.items():
        flag = f"--{key.replace('_', '-')}"
        if value.lower() == "true":      # boolean switch
            flags.append(flag)
        elif value.lower() == "false":
            continue
        else:
            flags.extend((flag, value))
    # insert after the subcommand name so explicit flags (later) win
    rest = argv[:i] + argv[i + 2:]
    if not rest:
        return rest
    return [rest[0]] + flags + rest[1:]


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    argv = list(sys.argv[1:] if argv is None else argv)
    argv = apply_config_file(build_parser(), argv)
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
