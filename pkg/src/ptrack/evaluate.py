"""Metrics and experiment harness.

Precision counts every reported box against ground truth; recall counts how
many visible-target frames got a correct report. A frame with no report
(abstain) enters neither numerator; an occluded frame enters neither
denominator when abstained on, and counts against precision when reported.

The ablation ladder compares five policies on one shared held-out suite:
the online baseline, three supervised rungs that splice the supervised
net's heads into the baseline (motion only, appearance only, both), and the
Q-learned policy. All rungs see identical episodes; each (episode, rung)
pair gets its own deterministic rng stream.
"""

from __future__ import annotations

import csv
import math
import multiprocessing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .backend import BackendConfig
from .core import Action, AppearanceChoice, BoundingBox, MotionChoice, iou
from .heuristics import online_action
from .learn import (
    EpisodeRun,
    FrameRecord,
    PolicyFn,
    ReplayDB,
    mixed_loss_and_grads,
    net_policy,
    online_policy,
    forced_policy,
    run_episode,
    sample_minibatch,
)
from .qnet import QNet, clip_grads_, init_net, sgd_step
from .sim import Episode, GroundTruth, ScenarioSpec, generate_episode, preset

IOU_CORRECT = 0.5


# ------------------------------------------------------------------- metrics

def precision_recall(reports: Sequence[Optional[BoundingBox]], gt: GroundTruth
                     ) -> tuple[float, float]:
    """reports[i] is the box reported at frame i, or None for abstain."""
    n_reported = 0
    n_correct = 0
    n_visible = 0
    for i, box in enumerate(reports):
        visible = gt.visible(i)
        if visible:
            n_visible += 1
        if box is None:
            continue
        n_reported += 1
        if visible and iou(box, gt.box(i)) >= IOU_CORRECT:
            n_correct += 1
    p = n_correct / n_reported if n_reported else 0.0
    r = n_correct / n_visible if n_visible else 0.0
    return p, r


def f1(p: float, r: float) -> float:
    if p + r == 0.0:
        return 0.0
    return 2.0 * p * r / (p + r)


def trajectory_f1(records: Sequence[FrameRecord], gt: GroundTruth) -> float:
    return f1(*precision_recall([rec.reported for rec in records], gt))


# ----------------------------------------------------------- supervised rung

def train_supervised_on_replay(db: ReplayDB, *, updates: int = 2000,
                               batch_size: int = 32, lr: float = 1e-4,
                               momentum: float = 0.9, weight_decay: float = 1e-8,
                               gamma: float = 0.95, seed: int = 0,
                               net: Optional[QNet] = None,
                               clip_norm: Optional[float] = 100.0) -> QNet:
    """Fit a net purely to the offline-label value seeds (mixture weight 1).

    This is the middle rung of the ladder: it imitates the offline heuristics
    without any reward bootstrapping.
    """
    if len(db) == 0:
        raise ValueError("replay buffer is empty")
    net = net if net is not None else init_net(seed)
    rng = np.random.default_rng(seed)
    bs = min(batch_size, len(db))
    for _ in range(updates):
        batch = sample_minibatch(db, bs, rng)
        loss, grads = mixed_loss_and_grads(net, batch, gamma, 1.0)
        if not math.isfinite(loss):
            raise RuntimeError("supervised fit diverged: non-finite loss")
        if clip_norm is not None:
            clip_grads_(grads, clip_norm)
        sgd_step(net, grads, lr, momentum, weight_decay)
    return net


# ------------------------------------------------------------ ablation ladder

RUNGS = ["online", "offline_motion", "offline_update", "offline_both", "q_learned"]


@dataclass(frozen=True)
class AblationArtifacts:
    q_net: QNet
    supervised_net: QNet
    tau: float = 0.2  # online-baseline confidence threshold


def rung_policy(name: str, art: AblationArtifacts) -> PolicyFn:
    """Splice supervised heads into the online baseline per rung."""
    if name not in RUNGS:
        raise ValueError(f"unknown rung {name!r}; expected one of {RUNGS}")
    if name == "online":
        return online_policy(art.tau)
    if name == "q_learned":
        return net_policy(art.q_net)
    sup = net_policy(art.supervised_net)

    def policy(state, plane, rng):
        a_sup = sup(state, plane, rng)
        a_base = online_action(state, art.tau)
        if name == "offline_motion":
            return Action(a_sup.motion, a_base.appearance)
        if name == "offline_update":
            return Action(a_base.motion, a_sup.appearance)
        return a_sup  # offline_both

    return policy


def heldout_suite(n_episodes: int = 16, episode_len: int = 5000,
                  seed_start: int = 900_000, preset_name: str = "long_term",
                  **overrides) -> list[ScenarioSpec]:
    """Specs only; episodes are generated one at a time to bound memory."""
    return [preset(preset_name, episode_len=episode_len, seed=seed_start + k,
                   **overrides) for k in range(n_episodes)]


def _evaluate_one(args) -> list[dict]:
    spec, art, backend_cfg, rungs, collect = args
    episode = generate_episode(spec)
    rows = []
    for ri, rung in enumerate(rungs):
        rng = np.random.default_rng((spec.seed, ri))
        run = run_episode(episode, rung_policy(rung, art), backend_cfg,
                          stride=len(episode), rng=rng, reward_mode="none")
        p, r = precision_recall([rec.reported for rec in run.records], episode.gt)
        rows.append({"policy": rung, "episode": episode.episode_id,
                     "p": round(p, 6), "r": round(r, 6), "f1": round(f1(p, r), 6)})
        if collect is not None:
            collect(rung, episode, run)
    return rows


def run_ablation(art: AblationArtifacts, suite: Sequence[ScenarioSpec],
                 backend_cfg: Optional[BackendConfig] = None,
                 rungs: Optional[Sequence[str]] = None, jobs: int = 1,
                 out_csv: Optional[Path] = None, collect=None) -> list[dict]:
    """Evaluate every rung on every suite episode; rows sorted by (policy, episode).

    collect(rung, episode, run), if given, is called after each evaluation so
    callers can harvest per-frame data without regenerating episodes; it
    requires jobs == 1.
    """
    backend_cfg = backend_cfg or BackendConfig()
    rungs = list(rungs) if rungs is not None else list(RUNGS)
    if collect is not None and jobs > 1:
        raise ValueError("collect callbacks require jobs=1")
    tasks = [(spec, art, backend_cfg, rungs, collect) for spec in suite]
    if jobs > 1:
        with multiprocessing.Pool(jobs) as pool:
            chunks = pool.map(_evaluate_one, tasks)
    else:
        chunks = [_evaluate_one(t) for t in tasks]
    rows = [row for chunk in chunks for row in chunk]
    rows.sort(key=lambda r: (rungs.index(r["policy"]), r["episode"]))
    if out_csv is not None:
        with open(out_csv, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=["policy", "episode", "p", "r", "f1"])
            w.writeheader()
            w.writerows(rows)
    return rows


def mean_f1_by_policy(rows: Sequence[dict]) -> dict[str, float]:
    acc: dict[str, list[float]] = {}
    for row in rows:
        acc.setdefault(row["policy"], []).append(float(row["f1"]))
    return {k: float(np.mean(v)) for k, v in acc.items()}


# --------------------------------------------------------- reinit recovery

def expected_recovery_median(hit_probability: float) -> int:
    """Median of the geometric 'one independent placement per frame' model."""
    if not 0.0 < hit_probability <= 1.0:
        raise ValueError("hit_probability must be in (0, 1]")
    if hit_probability == 1.0:
        return 1
    return math.ceil(math.log(0.5) / math.log(1.0 - hit_probability))


def _is_correct(rec: FrameRecord, gt: GroundTruth, i: int) -> bool:
    return (rec.reported is not None and gt.visible(i)
            and iou(rec.reported, gt.box(i)) >= IOU_CORRECT)


def recovery_times(run: EpisodeRun, gt: GroundTruth) -> list[dict]:
    """Per cut event: frames from the cut (inclusive) to the first correct
    report, or None if the episode/next cut arrives first (censored)."""
    T = len(run.records)
    cuts = [i for i in range(T) if bool(gt.cut[i])]
    out = []
    for k, c in enumerate(cuts):
        stop = cuts[k + 1] if k + 1 < len(cuts) else T
        took = None
        for i in range(c, stop):
            if _is_correct(run.records[i], gt, i):
                took = i - c + 1
                break
        out.append({"cut_frame": c, "frames_to_reacquire": took})
    return out


def reinit_recovery_stats(suite: Sequence[ScenarioSpec],
                          backend_cfg: Optional[BackendConfig] = None,
                          policy: Optional[PolicyFn] = None,
                          out_csv: Optional[Path] = None
                          ) -> tuple[Optional[float], list[dict]]:
    """Median frames-to-reacquire across all (uncensored) cut events."""
    backend_cfg = backend_cfg or BackendConfig()
    if policy is None:
        policy = forced_policy(Action(MotionChoice.REINIT, AppearanceChoice.IGNORE))
    rows = []
    for spec in suite:
        episode = generate_episode(spec)
        rng = np.random.default_rng((spec.seed, 77))
        run = run_episode(episode, policy, backend_cfg, stride=len(episode),
                          rng=rng, reward_mode="none")
        for ev in recovery_times(run, episode.gt):
            rows.append({"episode": episode.episode_id, **ev})
    times = [r["frames_to_reacquire"] for r in rows
             if r["frames_to_reacquire"] is not None]
    median = float(np.median(times)) if times else None
    if out_csv is not None:
        with open(out_csv, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=["episode", "cut_frame",
                                               "frames_to_reacquire"])
            w.writeheader()
            w.writerows(rows)
    return median, rows


# --------------------------------------------------------- occlusion behavior

@dataclass(frozen=True)
class IgnoreStats:
    ignore_occluded: int
    occluded: int
    ignore_visible: int
    visible: int
    p_value: float  # one-sided: IGNORE rate higher on occluded frames

    @property
    def occluded_fraction(self) -> float:
        return self.ignore_occluded / self.occluded if self.occluded else 0.0

    @property
    def visible_fraction(self) -> float:
        return self.ignore_visible / self.visible if self.visible else 0.0


def ignore_occlusion_stats(runs_and_gts: Sequence[tuple[EpisodeRun, GroundTruth]]
                           ) -> IgnoreStats:
    """Contingency of the appearance decision against target visibility,
    with a one-sided Fisher exact test for IGNORE-when-occluded."""
    io = oc = iv = vi = 0
    for run, gt in runs_and_gts:
        for rec in run.records:
            ignored = rec.action.appearance is AppearanceChoice.IGNORE
            if bool(gt.occluded[rec.index]):
                oc += 1
                io += int(ignored)
            elif gt.visible(rec.index):
                vi += 1
                iv += int(ignored)
    table = [[io, oc - io], [iv, vi - iv]]
    _, p = stats.fisher_exact(table, alternative="greater")
    return IgnoreStats(io, oc, iv, vi, float(p))
