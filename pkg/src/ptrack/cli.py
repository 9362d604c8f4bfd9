"""Operator entry point: reproducible commands over one JSON config.

Every command prints a single machine-readable JSON summary line on success;
failures print a JSON error line to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import config as cfgmod
from . import evaluate, learn
from .qnet import init_net, load_checkpoint
from .sim import export_episode, generate_episode, preset

log = logging.getLogger("ptrack")


def _setup_logging() -> None:
    level = os.environ.get("PTRACK_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def _emit(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True))


def _load_cfg(args: argparse.Namespace) -> dict:
    return cfgmod.load_config(getattr(args, "config", None))


def _out_dir(args: argparse.Namespace) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _eval_suite(cfg: dict, seed: int | None):
    ev = cfg["eval"]
    return evaluate.heldout_suite(
        n_episodes=ev["n_episodes"], episode_len=ev["episode_len"],
        seed_start=seed if seed is not None else ev["seed_start"],
        preset_name=ev["preset"], **ev["overrides"])


# ---------------------------------------------------------------- commands

def _cmd_simulate(args) -> int:
    cfg = _load_cfg(args)
    sim = cfg["sim"]
    seed = args.seed if args.seed is not None else sim["seed"]
    spec = preset(sim["preset"], episode_len=sim["episode_len"], seed=seed,
                  **sim["overrides"])
    episode = generate_episode(spec)
    out = export_episode(episode, _out_dir(args))
    _emit({"command": "simulate", "episode_id": episode.episode_id,
           "frames": len(episode.frames), "out": str(out)})
    return 0


def _cmd_train(args) -> int:
    cfg = _load_cfg(args)
    train_cfg = cfgmod.build_train(
        cfg, seed=args.seed, stride=args.stride, epsilon_start=args.epsilon,
        lambda_start=getattr(args, "lambda_"))
    out = _out_dir(args)
    result = learn.train(train_cfg, backend_cfg=cfgmod.build_backend(cfg),
                         out_dir=out)
    learn.save_replay(result.replay, out / "replay.jsonl")
    last_f1 = result.metrics[-1]["f1"] if result.metrics else None
    _emit({"command": "train", "episodes": train_cfg.episodes,
           "final_checkpoint": str(result.checkpoint_path),
           "metrics": str(out / "metrics.csv"),
           "replay": str(out / "replay.jsonl"), "last_f1": last_f1})
    return 0


def _artifacts(args, cfg: dict) -> evaluate.AblationArtifacts:
    q_net = (load_checkpoint(args.checkpoint) if args.checkpoint
             else init_net(cfg["qnet"]["init_seed"]))
    sup_path = getattr(args, "supervised_checkpoint", None)
    if sup_path:
        sup_net = load_checkpoint(sup_path)
    elif getattr(args, "replay", None):
        db = learn.load_replay(args.replay)
        sup_net = evaluate.train_supervised_on_replay(db)
    else:
        sup_net = q_net
    return evaluate.AblationArtifacts(q_net=q_net, supervised_net=sup_net,
                                      tau=cfg["eval"]["tau"])


def _cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    if args.policy != "online" and not args.checkpoint:
        raise ValueError(f"policy {args.policy!r} needs --checkpoint")
    art = _artifacts(args, cfg)
    suite = _eval_suite(cfg, args.seed)
    out = _out_dir(args) / "eval.csv"
    jobs = args.jobs if args.jobs is not None else cfg["eval"]["jobs"]
    rows = evaluate.run_ablation(art, suite, rungs=[args.policy], jobs=jobs,
                                 out_csv=out)
    _emit({"command": "eval", "policy": args.policy, "episodes": len(suite),
           "csv": str(out), "mean_f1": evaluate.mean_f1_by_policy(rows)})
    return 0


def _cmd_diagnose(args) -> int:
    cfg = _load_cfg(args)
    if not args.checkpoint:
        raise ValueError("diagnose needs --checkpoint for the trained net")
    if not (args.supervised_checkpoint or args.replay):
        raise ValueError("diagnose needs --supervised-checkpoint or --replay")
    art = _artifacts(args, cfg)
    suite = _eval_suite(cfg, args.seed)
    out = _out_dir(args) / "ablation.csv"
    jobs = args.jobs if args.jobs is not None else cfg["eval"]["jobs"]
    rows = evaluate.run_ablation(art, suite, jobs=jobs, out_csv=out)
    _emit({"command": "diagnose", "episodes": len(suite), "csv": str(out),
           "mean_f1": evaluate.mean_f1_by_policy(rows)})
    return 0


def _cmd_recovery(args) -> int:
    cfg = _load_cfg(args)
    suite = _eval_suite(cfg, args.seed)
    out = _out_dir(args) / "recovery.csv"
    median, rows = evaluate.reinit_recovery_stats(
        suite, backend_cfg=cfgmod.build_backend(cfg), out_csv=out)
    _emit({"command": "recovery", "median": median, "events": len(rows),
           "csv": str(out)})
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import ServiceSettings, build_app

    cfg = _load_cfg(args)
    srv = cfg["serve"]
    stride = args.stride if args.stride is not None else srv["stride"]
    settings = ServiceSettings(
        stride=stride, replay_capacity=srv["replay_capacity"],
        retrain_updates=srv["retrain_updates"],
        retrain_batch_size=srv["retrain_batch_size"],
        retrain_lr=srv["retrain_lr"],
        checkpoint=args.checkpoint, init_seed=cfg["qnet"]["init_seed"],
        data_dir=str(_out_dir(args)) if args.out_dir else None)
    app = build_app(settings)
    _emit({"command": "serve", "host": srv["host"], "port": srv["port"],
           "stride": stride})
    uvicorn.run(app, host=srv["host"], port=srv["port"], log_level="warning")
    return 0


def _cmd_replay_inspect(args) -> int:
    db = learn.load_replay(args.replay)
    rewards = [t.reward for t in db]
    labeled = sum(1 for t in db if t.appearance_label is not None)
    episodes = sorted({t.episode_id for t in db})
    payload = {"command": "replay-inspect", "tuples": len(db),
               "mean_reward": (sum(rewards) / len(rewards)) if rewards else None,
               "labeled": labeled, "episodes": len(episodes)}
    if args.dump:
        payload["head"] = [
            {"episode": t.episode_id, "frame": t.frame_index,
             "action": [t.action.motion.name, t.action.appearance.name],
             "reward": t.reward, "terminal": t.next_state_plane is None}
            for t in list(db)[: args.dump]]
    _emit(payload)
    return 0


# ------------------------------------------------------------------ parser

def _add_common(p: argparse.ArgumentParser, *, seed_help: str) -> None:
    p.add_argument("--config", help="JSON experiment config file")
    p.add_argument("--seed", type=int, help=seed_help)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ptrack",
        description="Self-improving tracker laboratory: simulation, "
                    "training, evaluation, and the annotation service.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate one episode to disk")
    _add_common(p, seed_help="episode seed (overrides sim.seed)")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=_cmd_simulate)

    p = sub.add_parser("train", help="oracle-reward training loop")
    _add_common(p, seed_help="training seed (overrides learn.seed)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--stride", type=int, help="reward sampling stride")
    p.add_argument("--epsilon", type=float, help="initial exploration rate")
    p.add_argument("--lambda", dest="lambda_", type=float,
                   help="initial supervised-loss weight")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="F1 of one policy over the held-out suite")
    _add_common(p, seed_help="suite seed start (overrides eval.seed_start)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--checkpoint", help="trained net checkpoint")
    p.add_argument("--policy", default="q_learned", choices=evaluate.RUNGS)
    p.add_argument("--jobs", type=int, help="parallel episode workers")
    p.add_argument("--supervised-checkpoint",
                   help="supervised net for offline_* policies")
    p.add_argument("--replay", help="replay JSONL to fit the supervised net")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("diagnose", help="full ablation ladder")
    _add_common(p, seed_help="suite seed start (overrides eval.seed_start)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--checkpoint", help="trained net checkpoint")
    p.add_argument("--supervised-checkpoint",
                   help="checkpoint for the supervised-only net")
    p.add_argument("--replay", help="replay JSONL to fit the supervised net")
    p.add_argument("--jobs", type=int, help="parallel episode workers")
    p.set_defaults(fn=_cmd_diagnose)

    p = sub.add_parser("recovery", help="reacquisition stats after cuts")
    _add_common(p, seed_help="suite seed start (overrides eval.seed_start)")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=_cmd_recovery)

    p = sub.add_parser("serve", help="annotation service")
    _add_common(p, seed_help="unused; nets come from --checkpoint")
    p.add_argument("--out-dir", help="directory for service artifacts")
    p.add_argument("--checkpoint", help="net to retrain from")
    p.add_argument("--stride", type=int, help="reward sampling stride")
    p.set_defaults(fn=_cmd_serve)

    p = sub.add_parser("replay-inspect", help="replay DB stats")
    p.add_argument("--replay", required=True, help="replay JSONL file")
    p.add_argument("--dump", type=int, default=0,
                   help="also print the first N tuples")
    p.set_defaults(fn=_cmd_replay_inspect)

    return parser


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # surfaced as a machine-readable error line
        log.debug("command failed", exc_info=True)
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
