"""Experiment orchestration CLI.

Subcommands cover the full pipeline: train the physics-informed surrogate,
build transition datasets, fit data-driven baselines, train policies on any
backing, evaluate, benchmark inference speed, and sweep the structural
parameters (n_envs, buffer_size). Every run writes a manifest with the
resolved inputs and hashes so results are replayable; numeric results are
emitted as JSON/CSV rather than plots.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import (
    TransitionDataset,
    build_agent_dataset,
    build_generative_dataset,
    evaluate_surrogate,
    fit_baseline,
)
from .env import DailyProfiles, GridEnv, State
from .grid import GridConfig, default_config, load_config
from .ppo import (
    PpoConfig,
    evaluation_episode,
    load_policy,
    random_policy_score,
    save_policy,
    train,
)
from .surrogate import (
    SurrogateBundle,
    SurrogateTrainConfig,
    benchmark_inference,
    evaluate_balance_model,
    evaluate_kkt_model,
    load_bundle,
    save_bundle,
    train_full_bundle,
)
from .vec_env import ReferenceBacking, VecEnv


def _load_cfg_profiles(args) -> tuple[GridConfig, DailyProfiles]:
    cfg = load_config(args.config) if args.config else default_config()
    if args.profiles:
        profiles = DailyProfiles.from_csv(args.profiles, cfg)
    else:
        profiles = DailyProfiles.default(cfg)
    return cfg, profiles


def _write_manifest(out: Path, args, cfg: GridConfig, extra: dict | None = None):
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": args.command,
        "argv": sys.argv[1:],
        "package_version": __version__,
        "config_hash": cfg.content_hash,
        "config_path": args.config or "<bundled>",
        "profiles_path": getattr(args, "profiles", None) or "<bundled>",
        "seed": getattr(args, "seed", None),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))


def _resolve_backing(args, cfg, profiles):
    """Build the transition backing selected by --backing."""
    if args.backing == "reference":
        return ReferenceBacking(cfg, profiles)
    if args.backing == "pinn":
        if not args.bundle:
            raise SystemExit("--backing pinn requires --bundle DIR")
        return load_bundle(args.bundle, cfg, profiles)
    if args.backing in ("linear", "mlp"):
        if not args.dataset:
            raise SystemExit(f"--backing {args.backing} requires --dataset FILE")
        ds = TransitionDataset.load(args.dataset)
        return fit_baseline(args.backing, ds, cfg, seed=args.seed)
    raise SystemExit(f"unknown backing '{args.backing}'")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_train_surrogate(args) -> int:
    cfg, profiles = _load_cfg_profiles(args)
    out = Path(args.out)
    tc = SurrogateTrainConfig(
        max_steps=args.max_steps,
        patience_steps=args.patience_steps,
        seed=args.seed,
    )
    terminal_data = None
    if args.terminal_samples > 0:
        env = GridEnv(cfg, profiles)
        ds = build_agent_dataset(env, args.terminal_samples, seed=args.seed)
        if ds.dones.any() and not ds.dones.all():
            feats = np.concatenate([ds.states, ds.actions], axis=1)
            terminal_data = (feats, ds.dones.astype(float))
        else:
            print("warning: terminal labels single-class; skipping classifier")
    bundle, reports = train_full_bundle(cfg, profiles, tc, terminal_data)
    save_bundle(bundle, out)

    results = {
        "gen": {"steps": reports["gen"].steps, "final_loss": reports["gen"].final_loss,
                "stopped_early": reports["gen"].stopped_early,
                "wall_time_s": reports["gen"].wall_time_s},
        "des": {"steps": reports["des"].steps, "final_loss": reports["des"].final_loss,
                "stopped_early": reports["des"].stopped_early,
                "wall_time_s": reports["des"].wall_time_s},
        "balance": {"steps": reports["balance"].steps,
                    "final_loss": reports["balance"].final_loss,
                    "stopped_early": reports["balance"].stopped_early,
                    "wall_time_s": reports["balance"].wall_time_s},
        "terminal_accuracy": reports["terminal_accuracy"],
        "holdout": {
            "gen_scaled_distance": evaluate_kkt_model(bundle.gen_model, cfg, n=512),
            "des_scaled_distance": evaluate_kkt_model(bundle.des_model, cfg, n=512),
            "balance": evaluate_balance_model(bundle.balance_model, cfg, n=256),
        },
    }
    (out / "training_report.json").write_text(json.dumps(results, indent=2))
    _write_manifest(out, args, cfg)
    print(json.dumps(results["holdout"], indent=2))
    print(f"bundle saved to {out}")
    return 0


def cmd_build_dataset(args) -> int:
    cfg, profiles = _load_cfg_profiles(args)
    env = GridEnv(cfg, profiles)
    if args.kind == "generative":
        ds = build_generative_dataset(env, args.n, seed=args.seed)
    else:
        ds = build_agent_dataset(env, args.n, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ds.save(out)
    print(f"{ds.kind} dataset: {ds.size} transitions, "
          f"{int(ds.dones.sum())} terminal, saved to {out}")
    return 0


def cmd_train_policy(args) -> int:
    cfg, profiles = _load_cfg_profiles(args)
    out = Path(args.out)
    backing = _resolve_backing(args, cfg, profiles)
    venv = VecEnv(
        cfg, backing, n_envs=args.n_envs, profiles=profiles,
        episode_length=args.episode_length or cfg.episode_length, seed=args.seed,
    )
    eval_env = GridEnv(cfg, profiles)
    pc = PpoConfig(
        n_envs=args.n_envs,
        buffer_size=args.buffer_size,
        total_steps=args.steps,
        eval_every=args.eval_every,
        patience_episodes=args.patience,
        seed=args.seed,
    )
    policy, value_net, log = train(
        venv, eval_env, pc,
        eval_episode_steps=args.episode_length or cfg.episode_length,
    )
    out.mkdir(parents=True, exist_ok=True)
    save_policy(policy, value_net, out / "policy")
    log.to_jsonl(out / "train_log.jsonl")
    summary = log.summary()
    summary["backing"] = args.backing
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    _write_manifest(out, args, cfg, {"backing": args.backing})
    print(json.dumps(summary, indent=2))
    return 0


def cmd_eval(args) -> int:
    cfg, profiles = _load_cfg_profiles(args)
    env = GridEnv(cfg, profiles)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    steps = args.episode_length or cfg.episode_length

    results: dict = {}
    if args.policy:
        policy = load_policy(cfg, args.policy)
        scores = [
            evaluation_episode(env, policy, steps, seed=args.seed + i)
            for i in range(args.episodes)
        ]
        results["policy_scores"] = scores
        results["policy_mean"] = float(np.mean(scores))
        rows = _trace_episode(env, policy, steps, seed=args.seed)
        _write_csv(out / "episode_trace.csv", rows)
    else:
        results["random_mean"] = random_policy_score(
            env, steps, episodes=args.episodes, seed=args.seed
        )

    if args.backing:
        surrogate = _resolve_backing(args, cfg, profiles)
        pol = load_policy(cfg, args.policy) if args.policy else "random"
        metrics = evaluate_surrogate(
            surrogate, env, policy=pol, episodes=args.episodes,
            max_steps=steps, seed=args.seed,
        )
        results["surrogate_metrics"] = metrics.to_dict()

    (out / "eval.json").write_text(json.dumps(results, indent=2))
    _write_manifest(out, args, cfg)
    print(json.dumps({k: v for k, v in results.items() if k != "surrogate_metrics"},
                     indent=2))
    return 0


def _trace_episode(env: GridEnv, policy, steps: int, seed: int) -> list[dict]:
    state = env.reset(seed=seed)
    rows = []
    for t in range(steps):
        a = policy.mean_action(state.to_vector())
        out = env.step(a)
        row = {"step": t, "aux": state.aux, "soc": state.soc}
        row.update({f"a{j}": float(v) for j, v in enumerate(a)})
        row.update(
            {
                "reward": out.reward,
                "done": out.done,
                "de1": out.info.get("de1"),
                "de2": out.info.get("de2"),
                "de3": out.info.get("de3"),
                "phi": out.info.get("phi"),
            }
        )
        rows.append(row)
        state = out.next_state
        if out.done:
            break
    return rows


def _write_csv(path: Path, rows: list[dict]):
    if not rows:
        path.write_text("")
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def cmd_bench(args) -> int:
    cfg, profiles = _load_cfg_profiles(args)
    bundle = load_bundle(args.bundle, cfg, profiles)
    env = GridEnv(cfg, profiles)
    report = benchmark_inference(bundle, env, n=args.n, batch=args.batch, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "bench.json").write_text(json.dumps(report, indent=2))
    _write_manifest(out, args, cfg)
    print(json.dumps(report, indent=2))
    return 0


def cmd_sweep(args) -> int:
    cfg, profiles = _load_cfg_profiles(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n_envs_grid = [int(v) for v in args.n_envs_grid.split(",")]
    buffer_grid = [int(v) for v in args.buffer_grid.split(",")]
    backing = _resolve_backing(args, cfg, profiles)
    eval_env = GridEnv(cfg, profiles)
    episode_length = args.episode_length or cfg.episode_length

    rows = []
    for ne in n_envs_grid:
        for bs in buffer_grid:
            cell_out = out / f"cell_n{ne}_b{bs}"
            venv = VecEnv(cfg, backing, n_envs=ne, profiles=profiles,
                          episode_length=episode_length, seed=args.seed)
            pc = PpoConfig(
                n_envs=ne, buffer_size=bs, total_steps=args.steps,
                eval_every=args.eval_every, patience_episodes=args.patience,
                seed=args.seed,
            )
            t0 = time.perf_counter()
            policy, value_net, log = train(
                venv, eval_env, pc, eval_episode_steps=episode_length
            )
            wall = time.perf_counter() - t0
            evals = [r["eval_score"] for r in log.records if "eval_score" in r]
            mean_last10 = float(np.mean(evals[-10:])) if evals else float("nan")
            cell_out.mkdir(parents=True, exist_ok=True)
            log.to_jsonl(cell_out / "train_log.jsonl")
            rows.append(
                {
                    "n_envs": ne,
                    "buffer_size": bs,
                    "mean_reward_last10": mean_last10,
                    "best_score": log.best_score,
                    "total_steps": log.total_steps,
                    "train_time_s": wall,
                    "stopped_early": log.stopped_early,
                }
            )
            print(f"cell n_envs={ne} buffer={bs}: reward {mean_last10:.1f} "
                  f"time {wall:.1f}s")

    _write_csv(out / "sweep.csv", rows)
    ne_arr = np.array([r["n_envs"] for r in rows], dtype=float)
    bs_arr = np.array([r["buffer_size"] for r in rows], dtype=float)
    rew = np.array([r["mean_reward_last10"] for r in rows])
    t_arr = np.array([r["train_time_s"] for r in rows])
    corr = {
        "buffer_vs_reward": _corr(bs_arr, rew),
        "n_envs_vs_reward": _corr(ne_arr, rew),
        "buffer_vs_time": _corr(bs_arr, t_arr),
        "n_envs_vs_time": _corr(ne_arr, t_arr),
    }
    (out / "correlations.json").write_text(json.dumps(corr, indent=2))
    _write_manifest(out, args, cfg, {"backing": args.backing})
    print(json.dumps(corr, indent=2))
    return 0


def _corr(a: np.ndarray, b: np.ndarray) -> float:
    if np.std(a) < 1e-12 or np.std(b) < 1e-12:
        return float("nan")
    return float(np.corrcoef(a, b)[0, 1])


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", default=None, help="grid config JSON (default: bundled)")
    p.add_argument("--profiles", default=None, help="profiles CSV (default: bundled)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="runs/out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gridpinn",
        description="Physics-informed surrogate environments for grid control RL",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-surrogate", help="train the physics-informed bundle")
    _add_common(p)
    p.add_argument("--max-steps", type=int, default=150_000)
    p.add_argument("--patience-steps", type=int, default=5000)
    p.add_argument("--terminal-samples", type=int, default=8000,
                   help="random-agent transitions for the terminal classifier")
    p.set_defaults(func=cmd_train_surrogate)

    p = sub.add_parser("build-dataset", help="collect a transition dataset")
    _add_common(p)
    p.add_argument("--kind", choices=["generative", "agent"], required=True)
    p.add_argument("--n", type=int, default=10_000)
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("train-policy", help="PPO on a selected backing")
    _add_common(p)
    p.add_argument("--backing", choices=["reference", "pinn", "linear", "mlp"],
                   default="reference")
    p.add_argument("--bundle", default=None, help="bundle dir for --backing pinn")
    p.add_argument("--dataset", default=None, help="dataset for baseline backings")
    p.add_argument("--n-envs", type=int, default=8)
    p.add_argument("--buffer-size", type=int, default=64)
    p.add_argument("--steps", type=int, default=100_000)
    p.add_argument("--eval-every", type=int, default=1)
    p.add_argument("--patience", type=int, default=20)
    p.add_argument("--episode-length", type=int, default=None)
    p.set_defaults(func=cmd_train_policy)

    p = sub.add_parser("eval", help="evaluate a policy and/or surrogate accuracy")
    _add_common(p)
    p.add_argument("--policy", default=None, help="policy checkpoint dir")
    p.add_argument("--backing", choices=["pinn", "linear", "mlp"], default=None)
    p.add_argument("--bundle", default=None)
    p.add_argument("--dataset", default=None)
    p.add_argument("--episodes", type=int, default=3)
    p.add_argument("--episode-length", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="surrogate vs environment inference timing")
    _add_common(p)
    p.add_argument("--bundle", required=True)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--batch", type=int, default=100)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sweep", help="structural-parameter sweep (n_envs x buffer)")
    _add_common(p)
    p.add_argument("--backing", choices=["reference", "pinn", "linear", "mlp"],
                   default="pinn")
    p.add_argument("--bundle", default=None)
    p.add_argument("--dataset", default=None)
    p.add_argument("--n-envs-grid", default="2,4,8")
    p.add_argument("--buffer-grid", default="16,64,256")
    p.add_argument("--steps", type=int, default=30_000)
    p.add_argument("--eval-every", type=int, default=1)
    p.add_argument("--patience", type=int, default=12)
    p.add_argument("--episode-length", type=int, default=288)
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (FileNotFoundError, ValueError, SystemExit) as exc:
        if isinstance(exc, SystemExit):
            raise
        print(f"error [{args.command}]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
