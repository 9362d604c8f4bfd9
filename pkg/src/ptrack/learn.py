"""Learning engine: experience replay, the two-head Q-loss, the
heuristic-seeded mixed loss, and the streaming train loop.

Rewards are sparse: only every stride-th frame of a run is evaluated (by the
simulator oracle or by a human annotator), so one tuple is stored per stride
frame. Each tuple's next state is the belief immediately after acting, and
the last stride frame of an episode is terminal.

During oracle-reward training the ground-truth-aware offline labels are
attached to each tuple; the mixed loss regresses both outputs of each head
toward the label's discounted-return seed, annealing that supervision away
as Q-learning takes over. Tuples from annotated runs carry no labels and
simply contribute nothing to the supervised term.

Everything here is a pure function of (config, seeds): training twice with
the same config yields bit-identical checkpoints and metrics.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .backend import BackendConfig, init_belief, step_belief
from .core import (
    Action,
    AgentState,
    AppearanceChoice,
    MotionChoice,
    argmax_cell,
    box_around,
    extract_box,
    iou,
)
from .heuristics import (
    geometric_return,
    offline_update_label,
    online_action,
)
from .qnet import (
    QNet,
    ForwardCache,
    backward_batch,
    clip_grads_,
    featurize_heatmap,
    forward,
    forward_batch,
    greedy_action,
    init_net,
    save_checkpoint,
    sgd_step,
)
from .sim import Episode, GroundTruth, generate_episode, oracle_reward, preset

_PLANE_SUM_TOL = 1e-6


# ------------------------------------------------------------------- replay

@dataclass(frozen=True)
class ExperienceTuple:
    state_plane: np.ndarray  # 64x64, sums to 1
    action: Action
    reward: float  # binary
    next_state_plane: Optional[np.ndarray]  # None marks a terminal sample
    episode_id: str
    frame_index: int
    # Offline-heuristic labels; absent for annotated (ground-truth-free) runs.
    motion_label: Optional[MotionChoice] = None
    appearance_label: Optional[AppearanceChoice] = None
    remaining: Optional[int] = None


def _validate_plane(plane: np.ndarray, what: str) -> None:
    if plane.shape != (64, 64):
        raise ValueError(f"{what} must be 64x64, got {plane.shape}")
    s = float(plane.sum())
    if not math.isfinite(s) or abs(s - 1.0) > _PLANE_SUM_TOL:
        raise ValueError(f"{what} must sum to 1 +- {_PLANE_SUM_TOL}, got {s}")


class ReplayDB:
    """Append-only FIFO buffer of experience tuples."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._items: list[ExperienceTuple] = []

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def __getitem__(self, i: int) -> ExperienceTuple:
        return self._items[i]

    def push(self, t: ExperienceTuple) -> None:
        if t.reward not in (0, 1):
            raise ValueError(f"reward must be binary, got {t.reward!r}")
        _validate_plane(t.state_plane, "state_plane")
        if t.next_state_plane is not None:
            _validate_plane(t.next_state_plane, "next_state_plane")
        self._items.append(t)
        if len(self._items) > self.capacity:
            del self._items[0]


def sample_minibatch(db: ReplayDB, k: int, rng: np.random.Generator
                     ) -> list[ExperienceTuple]:
    """k tuples uniformly without replacement."""
    if k > len(db):
        raise ValueError(f"minibatch {k} exceeds replay size {len(db)}")
    idx = rng.choice(len(db), size=k, replace=False)
    return [db[int(i)] for i in idx]


# -------------------------------------------------------- replay persistence

def _action_to_json(a: Action) -> list[str]:
    return [a.motion.name, a.appearance.name]


def _action_from_json(v: Sequence[str]) -> Action:
    return Action(MotionChoice[v[0]], AppearanceChoice[v[1]])


def save_replay(db: ReplayDB, path) -> None:
    """JSON Lines; planes as nested row-major arrays at float32 precision."""
    with open(path, "w", encoding="utf-8") as fh:
        for t in db:
            fh.write(json.dumps({
                "episode_id": t.episode_id,
                "frame_index": t.frame_index,
                "action": _action_to_json(t.action),
                "reward": int(t.reward),
                "state_plane": t.state_plane.astype(np.float32).tolist(),
                "next_state_plane": (None if t.next_state_plane is None
                                     else t.next_state_plane.astype(np.float32).tolist()),
                "motion_label": None if t.motion_label is None else t.motion_label.name,
                "appearance_label": (None if t.appearance_label is None
                                     else t.appearance_label.name),
                "remaining": t.remaining,
            }) + "\n")


def load_replay(path, capacity: Optional[int] = None) -> ReplayDB:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rows.append(json.loads(line))
    db = ReplayDB(capacity if capacity is not None else max(1, len(rows)))
    for d in rows:
        db.push(ExperienceTuple(
            state_plane=np.array(d["state_plane"], dtype=np.float32),
            action=_action_from_json(d["action"]),
            reward=float(d["reward"]),
            next_state_plane=(None if d["next_state_plane"] is None
                              else np.array(d["next_state_plane"], dtype=np.float32)),
            episode_id=d["episode_id"],
            frame_index=int(d["frame_index"]),
            motion_label=(None if d["motion_label"] is None
                          else MotionChoice[d["motion_label"]]),
            appearance_label=(None if d["appearance_label"] is None
                              else AppearanceChoice[d["appearance_label"]]),
            remaining=d["remaining"],
        ))
    return db


# ------------------------------------------------------------------- losses

def _action_indices(batch: Sequence[ExperienceTuple]) -> tuple[np.ndarray, np.ndarray]:
    am = np.array([0 if t.action.motion is MotionChoice.TRACK else 1 for t in batch])
    aa = np.array([0 if t.action.appearance is AppearanceChoice.UPDATE else 1
                   for t in batch])
    return am, aa


def _q_parts(net: QNet, batch: Sequence[ExperienceTuple], gamma: float
             ) -> tuple[float, np.ndarray, np.ndarray, np.ndarray, np.ndarray, ForwardCache]:
    n = len(batch)
    planes = np.stack([t.state_plane for t in batch]).astype(np.float32)
    qm, qa, cache = forward_batch(net, planes, want_cache=True)

    vm = np.zeros(n)
    va = np.zeros(n)
    alive = [i for i, t in enumerate(batch) if t.next_state_plane is not None]
    if alive:
        nxt = np.stack([batch[i].next_state_plane for i in alive]).astype(np.float32)
        nqm, nqa = forward_batch(net, nxt)
        vm[alive] = nqm.max(axis=1)
        va[alive] = nqa.max(axis=1)

    r = np.array([t.reward for t in batch], dtype=np.float64)
    tm = r + gamma * vm  # terminal rows keep vm = 0, so target = r
    ta = r + gamma * va
    am, aa = _action_indices(batch)
    rows = np.arange(n)
    em = qm[rows, am].astype(np.float64) - tm
    ea = qa[rows, aa].astype(np.float64) - ta
    loss = float((em @ em + ea @ ea) / (2 * n))
    dqm = np.zeros_like(qm, dtype=np.float64)
    dqa = np.zeros_like(qa, dtype=np.float64)
    dqm[rows, am] = em / n  # d/dq of mean over 2n squared terms
    dqa[rows, aa] = ea / n
    return loss, dqm, dqa, qm, qa, cache


def q_loss_and_targets(net: QNet, batch: Sequence[ExperienceTuple], gamma: float
                       ) -> tuple[float, tuple[np.ndarray, np.ndarray]]:
    """Scalar TD loss and its gradients at the two heads' outputs.

    Targets are treated as constants: no gradient flows through the
    next-state values, and only the taken action's output receives gradient.
    """
    loss, dqm, dqa, _, _, _ = _q_parts(net, batch, gamma)
    return loss, (dqm, dqa)


def _supervised_parts(batch: Sequence[ExperienceTuple], qm: np.ndarray,
                      qa: np.ndarray, gamma: float
                      ) -> tuple[float, np.ndarray, np.ndarray]:
    """Regression of both outputs per labeled head toward the value seeds."""
    n = len(batch)
    tgt_m = np.zeros((n, 2))
    tgt_a = np.zeros((n, 2))
    mask_m = np.zeros(n, dtype=bool)
    mask_a = np.zeros(n, dtype=bool)
    for i, t in enumerate(batch):
        if t.remaining is None:
            continue
        g = geometric_return(t.remaining, gamma)
        if t.motion_label is not None:
            tgt_m[i, 0 if t.motion_label is MotionChoice.TRACK else 1] = g
            mask_m[i] = True
        if t.appearance_label is not None:
            tgt_a[i, 0 if t.appearance_label is AppearanceChoice.UPDATE else 1] = g
            mask_a[i] = True
    count = 2 * (int(mask_m.sum()) + int(mask_a.sum()))
    if count == 0:
        return 0.0, np.zeros_like(tgt_m), np.zeros_like(tgt_a)
    em = (qm.astype(np.float64) - tgt_m) * mask_m[:, None]
    ea = (qa.astype(np.float64) - tgt_a) * mask_a[:, None]
    loss = float((np.sum(em * em) + np.sum(ea * ea)) / count)
    return loss, 2.0 * em / count, 2.0 * ea / count


def mixed_loss_and_grads(net: QNet, batch: Sequence[ExperienceTuple], gamma: float,
                         lam: float) -> tuple[float, dict[str, np.ndarray]]:
    """(1 - lambda) * TD loss + lambda * value-seed regression, one backprop."""
    q_loss, dqm_q, dqa_q, qm, qa, cache = _q_parts(net, batch, gamma)
    s_loss, dqm_s, dqa_s = _supervised_parts(batch, qm, qa, gamma)
    loss = (1.0 - lam) * q_loss + lam * s_loss
    dqm = (1.0 - lam) * dqm_q + lam * dqm_s
    dqa = (1.0 - lam) * dqa_q + lam * dqa_s
    grads = backward_batch(net, cache, dqm.astype(np.float32), dqa.astype(np.float32))
    return loss, grads


def mixed_loss(net: QNet, batch: Sequence[ExperienceTuple], gamma: float,
               lam: float) -> float:
    loss, _ = mixed_loss_and_grads(net, batch, gamma, lam)
    return loss


# ----------------------------------------------------------------- policies

PolicyFn = Callable[[AgentState, np.ndarray, np.random.Generator], Action]

_MOTIONS = (MotionChoice.TRACK, MotionChoice.REINIT)
_APPEARANCES = (AppearanceChoice.UPDATE, AppearanceChoice.IGNORE)


def net_policy(net: QNet, epsilon: float = 0.0) -> PolicyFn:
    """Greedy per-head argmax; each head independently explores with prob eps."""

    def policy(state: AgentState, plane: np.ndarray, rng: np.random.Generator) -> Action:
        a = greedy_action(forward(net, plane))
        if epsilon > 0.0:
            motion = (_MOTIONS[rng.integers(2)] if rng.random() < epsilon
                      else a.motion)
            appearance = (_APPEARANCES[rng.integers(2)] if rng.random() < epsilon
                          else a.appearance)
            return Action(motion, appearance)
        return a

    return policy


def online_policy(tau: float) -> PolicyFn:
    def policy(state: AgentState, plane: np.ndarray, rng: np.random.Generator) -> Action:
        return online_action(state, tau)

    return policy


def forced_policy(action: Action) -> PolicyFn:
    def policy(state: AgentState, plane: np.ndarray, rng: np.random.Generator) -> Action:
        return action

    return policy


# -------------------------------------------------------------- episode run

@dataclass(frozen=True)
class FrameRecord:
    index: int
    action: Action
    peak_cell: tuple[int, int]
    max_score: float
    reported: Optional[object]  # BoundingBox or None (abstain)
    budget: int


@dataclass
class StrideSample:
    frame_index: int
    state_plane: np.ndarray
    action: Action
    next_state_plane: Optional[np.ndarray]
    reward: Optional[float] = None
    motion_label: Optional[MotionChoice] = None
    appearance_label: Optional[AppearanceChoice] = None
    remaining: Optional[int] = None


@dataclass
class EpisodeRun:
    episode_id: str
    records: list[FrameRecord]
    samples: list[StrideSample]

    def mean_reward(self) -> float:
        rs = [s.reward for s in self.samples if s.reward is not None]
        return float(np.mean(rs)) if rs else 0.0


def to_tuples(run: EpisodeRun) -> list[ExperienceTuple]:
    out = []
    for s in run.samples:
        if s.reward is None:
            raise ValueError(f"sample at frame {s.frame_index} has no reward yet")
        out.append(ExperienceTuple(
            state_plane=s.state_plane,
            action=s.action,
            reward=s.reward,
            next_state_plane=s.next_state_plane,
            episode_id=run.episode_id,
            frame_index=s.frame_index,
            motion_label=s.motion_label,
            appearance_label=s.appearance_label,
            remaining=s.remaining,
        ))
    return out


def _motion_label_from_peak(prev_cell: tuple[int, int], gt: GroundTruth, i: int,
                            target_size: tuple[int, int], frame_shape: tuple[int, int],
                            ) -> Optional[MotionChoice]:
    if not gt.visible(i):
        return None
    H, W = frame_shape
    peak_box = box_around(prev_cell[0], prev_cell[1], target_size, H, W)
    return (MotionChoice.TRACK if iou(peak_box, gt.box(i)) >= 0.5
            else MotionChoice.REINIT)


def run_episode(episode: Episode, policy: PolicyFn, cfg: BackendConfig,
                stride: int, rng: np.random.Generator, *,
                reward_mode: str = "oracle", with_labels: bool = False,
                lookahead: int = 30) -> EpisodeRun:
    """Stream the episode under a policy, recording the trajectory and one
    stride sample per rewarded frame.

    The belief is initialized from the frame-0 ground-truth box before the
    loop, so frame 0 is the first decision (and the first stride sample).
    reward_mode: "oracle" fills rewards from ground truth; "none" leaves
    them unset for later annotation.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if reward_mode not in ("oracle", "none"):
        raise ValueError(f"unknown reward_mode {reward_mode!r}")
    T = len(episode)
    frame_shape = episode.frames.shape[1:]
    init_box = episode.gt.box(0)
    belief = init_belief(episode.frame(0), init_box, cfg)
    target_size = belief.appearance.target_size

    records: list[FrameRecord] = []
    samples: list[StrideSample] = []
    peaks: list[tuple[int, int]] = []
    theta_snaps: dict[int, object] = {}
    prev_cells: dict[int, tuple[int, int]] = {}

    for i in range(T):
        frame = episode.frame(i)
        state = AgentState(belief=belief, frame=frame)
        plane = featurize_heatmap(belief.heatmap)
        action = policy(state, plane, rng)
        if i % stride == 0:
            theta_snaps[i] = belief.appearance
            prev_cells[i] = argmax_cell(belief.heatmap)
        belief_next, budget = step_belief(belief, frame, action, cfg, rng)
        h = belief_next.heatmap
        mx = float(h.max())
        cell = argmax_cell(h)
        reported = extract_box(h, target_size) if mx >= cfg.report_threshold else None
        records.append(FrameRecord(i, action, cell, mx, reported,
                                   budget.candidates_evaluated))
        peaks.append(cell)
        if i % stride == 0:
            samples.append(StrideSample(
                frame_index=i,
                state_plane=plane,
                action=action,
                next_state_plane=featurize_heatmap(h),
            ))
        belief = belief_next

    samples[-1].next_state_plane = None  # last stride frame is terminal

    if reward_mode == "oracle":
        for s in samples:
            s.reward = float(oracle_reward(episode.gt, s.frame_index,
                                           records[s.frame_index].reported))
    if with_labels:
        for s in samples:
            i = s.frame_index
            s.motion_label = _motion_label_from_peak(
                prev_cells[i], episode.gt, i, target_size, frame_shape)
            ev = offline_update_label(theta_snaps[i], episode, i, peaks, cfg,
                                      lookahead=lookahead)
            s.appearance_label = ev.choice
            s.remaining = T - i
    return EpisodeRun(episode_id=episode.episode_id, records=records,
                      samples=samples)


# ------------------------------------------------------------------ training

@dataclass(frozen=True)
class TrainConfig:
    episodes: int = 200
    episode_preset: str = "short_term"
    episode_len: int = 600
    # A dict applies to every training episode; a list/tuple of dicts is
    # cycled per episode (curriculum), e.g. alternating distractor-free
    # episodes (clean appearance labels) with full-clutter ones (evaluation-
    # shaped state planes; motion labels stay exact under the IoU rule).
    scenario_overrides: dict | list | tuple = field(default_factory=dict)
    gamma: float = 0.95
    lr: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 1e-8
    batch_size: int = 32
    updates_per_episode: int = 64
    stride: int = 50
    epsilon_start: float = 0.1
    epsilon_end: float = 0.0
    lambda_start: float = 1.0
    lambda_end: float = 0.1
    replay_capacity: int = 50_000
    lookahead: int = 30
    seed: int = 0
    train_seed_start: int = 1000  # episode seeds; keep disjoint from eval seeds
    checkpoint_every: int = 50
    # Initial Q-value of the conservative pair (TRACK, IGNORE); 0 keeps the
    # plain random init. A discounted-return-scaled prior makes the fresh
    # net's greedy behavior hold the track and protect the filter, which in
    # turn keeps early training runs clean enough for the offline labels to
    # carry signal.
    conservative_init: float = 0.0
    # Global L2 cap on each minibatch gradient; None disables clipping.
    clip_norm: Optional[float] = 100.0

    def __post_init__(self) -> None:
        if self.episodes < 0 or self.batch_size < 1 or self.stride < 1:
            raise ValueError("bad training sizes")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must be in [0, 1)")


def epsilon_at(cfg: TrainConfig, episode_index: int) -> float:
    """Linear anneal across the whole run."""
    if cfg.episodes <= 1:
        return cfg.epsilon_start
    f = episode_index / (cfg.episodes - 1)
    return cfg.epsilon_start + (cfg.epsilon_end - cfg.epsilon_start) * min(1.0, f)


def lambda_at(cfg: TrainConfig, episode_index: int) -> float:
    """Linear anneal over the first half of the run, then flat."""
    half = max(1, cfg.episodes // 2)
    f = min(1.0, episode_index / half)
    return cfg.lambda_start + (cfg.lambda_end - cfg.lambda_start) * f


@dataclass
class TrainResult:
    net: QNet
    metrics: list[dict]
    replay: ReplayDB
    checkpoint_path: Optional[Path] = None


METRICS_FIELDS = ["episode", "mean_reward", "f1", "loss", "epsilon", "lambda"]


def _write_metrics(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=METRICS_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in METRICS_FIELDS})


def train(cfg: TrainConfig, backend_cfg: Optional[BackendConfig] = None,
          out_dir: Optional[Path] = None, db: Optional[ReplayDB] = None,
          net: Optional[QNet] = None, progress: Optional[Callable[[dict], None]] = None
          ) -> TrainResult:
    """Streamed training: one fresh episode per iteration under the current
    net, then a burst of minibatch updates on the replay buffer.

    Passing an existing db with net runs in annotated-replay mode when
    episodes = 0 is combined with updates via retrain_on_replay below.
    """
    backend_cfg = backend_cfg or BackendConfig()
    net = net if net is not None else init_net(cfg.seed, cfg.conservative_init)
    db = db if db is not None else ReplayDB(cfg.replay_capacity)
    rng = np.random.default_rng(cfg.seed)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

    from .evaluate import trajectory_f1  # late import; evaluate depends on us

    metrics: list[dict] = []
    ckpt_path: Optional[Path] = None
    for e in range(cfg.episodes):
        eps = epsilon_at(cfg, e)
        lam = lambda_at(cfg, e)
        ov = cfg.scenario_overrides
        if isinstance(ov, (list, tuple)):
            ov = ov[e % len(ov)] if ov else {}
        kw = {"episode_len": cfg.episode_len,
              "seed": cfg.train_seed_start + e, **ov}
        spec = preset(cfg.episode_preset, **kw)
        episode = generate_episode(spec)
        run = run_episode(episode, net_policy(net, epsilon=eps), backend_cfg,
                          cfg.stride, rng, reward_mode="oracle",
                          with_labels=True, lookahead=cfg.lookahead)
        for t in to_tuples(run):
            db.push(t)

        loss = math.nan
        if len(db) >= cfg.batch_size:
            for _ in range(cfg.updates_per_episode):
                batch = sample_minibatch(db, cfg.batch_size, rng)
                loss, grads = mixed_loss_and_grads(net, batch, cfg.gamma, lam)
                if not math.isfinite(loss):
                    raise RuntimeError(
                        f"training diverged: non-finite loss at episode {e}")
                if cfg.clip_norm is not None:
                    clip_grads_(grads, cfg.clip_norm)
                sgd_step(net, grads, cfg.lr, cfg.momentum, cfg.weight_decay)

        row = {
            "episode": e,
            "mean_reward": round(run.mean_reward(), 6),
            "f1": round(trajectory_f1(run.records, episode.gt), 6),
            "loss": (round(loss, 8) if math.isfinite(loss) else ""),
            "epsilon": round(eps, 6),
            "lambda": round(lam, 6),
        }
        metrics.append(row)
        if progress is not None:
            progress(row)
        if out_dir is not None and cfg.checkpoint_every > 0 and \
                (e + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(net, out_dir / f"checkpoint_{e + 1:06d}.ptrk")

    if out_dir is not None:
        ckpt_path = out_dir / "checkpoint_final.ptrk"
        save_checkpoint(net, ckpt_path)
        _write_metrics(out_dir / "metrics.csv", metrics)
    return TrainResult(net=net, metrics=metrics, replay=db,
                       checkpoint_path=ckpt_path)


def retrain_on_replay(net: QNet, db: ReplayDB, *, gamma: float = 0.95,
                      lr: float = 1e-4, momentum: float = 0.9,
                      weight_decay: float = 1e-8, batch_size: int = 32,
                      updates: int = 64, seed: int = 0,
                      clip_norm: Optional[float] = 100.0) -> float:
    """Annotated-replay mode: pure TD updates on whatever the buffer holds.

    Returns the last minibatch loss. Uses lambda = 0 because annotated tuples
    carry no heuristic labels.
    """
    if len(db) == 0:
        raise ValueError("replay buffer is empty")
    rng = np.random.default_rng(seed)
    bs = min(batch_size, len(db))
    loss = math.nan
    for _ in range(updates):
        batch = sample_minibatch(db, bs, rng)
        loss, grads = mixed_loss_and_grads(net, batch, gamma, 0.0)
        if not math.isfinite(loss):
            raise RuntimeError("retraining diverged: non-finite loss")
        if clip_norm is not None:
            clip_grads_(grads, clip_norm)
        sgd_step(net, grads, lr, momentum, weight_decay)
    return loss
