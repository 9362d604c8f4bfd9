"""Action oracles.

Two kinds live here. The online heuristic is the deployable baseline: it
never reinitializes and refreshes the appearance model whenever confidence
clears a threshold. The offline heuristics see ground truth and therefore
exist only at training time: they label which motion/appearance choices a
competent agent *should* have made, and those labels seed the value targets
that regularize early Q-learning.

The appearance label is counterfactual: it simulates the filter refit at the
run's reported location and scores the would-be filter against the current
one over a short lookahead window — does the refit raise confidence at the
true target (delta_plus) and suppress it at the run's wrong peaks
(delta_minus)? The window is the next N *visible* frames: invisible frames
are skipped without consuming it, and it may come up short at episode end.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional, Sequence

from .backend import BackendConfig, features, score_at, update_appearance_at
from .core import (
    Action,
    AppearanceChoice,
    AppearanceModel,
    AgentState,
    BoundingBox,
    MotionChoice,
    box_around,
    iou,
)
from .sim import Episode

DEFAULT_LOOKAHEAD = 30
IOU_HIT = 0.5


def online_action(state: AgentState, tau: float) -> Action:
    """Track always; update the filter iff max heatmap score >= tau."""
    confident = float(state.belief.heatmap.max()) >= tau
    return Action(
        MotionChoice.TRACK,
        AppearanceChoice.UPDATE if confident else AppearanceChoice.IGNORE,
    )


def offline_motion_label(h, gt, i: int, target_size: tuple[int, int],
                         invisible_reinit: bool = False) -> Optional[MotionChoice]:
    """TRACK iff the heatmap peak box still overlaps the target at frame i.

    Returns None (no label) when the target is invisible, unless
    invisible_reinit is set, in which case such frames are labeled REINIT.
    """
    if not gt.visible(i):
        return MotionChoice.REINIT if invisible_reinit else None
    H, W = h.shape
    cell = divmod(int(h.argmax()), W)
    peak_box = box_around(cell[0], cell[1], target_size, H, W)
    hit = iou(peak_box, gt.box(i)) >= IOU_HIT
    return MotionChoice.TRACK if hit else MotionChoice.REINIT


def update_decision(delta_plus: int, delta_minus: int, n: int) -> AppearanceChoice:
    """UPDATE iff the evidence clears a strict majority of the window."""
    if delta_plus + delta_minus > 0.5 * n:
        return AppearanceChoice.UPDATE
    return AppearanceChoice.IGNORE


@dataclass(frozen=True)
class UpdateEvidence:
    choice: AppearanceChoice
    delta_plus: int
    delta_minus: int
    n: int


def offline_update_label(theta: AppearanceModel, episode: Episode, i: int,
                         peak_cells: Sequence[tuple[int, int]], cfg: BackendConfig,
                         lookahead: int = DEFAULT_LOOKAHEAD) -> UpdateEvidence:
    """Simulate the refit at frame i's reported peak and score it forward.

    The evidence window is the next `lookahead` *visible* frames (invisible
    frames are skipped without consuming the window; the scan stops at the
    episode end, so n may come up short). peak_cells[j] is the recorded
    heatmap argmax of the run at frame j; it provides both the refit location
    at i and the wrong-peak locations used for the suppression count.
    """
    T = episode.frames.shape[0]
    if i >= T - 1:
        return UpdateEvidence(AppearanceChoice.IGNORE, 0, 0, 0)

    H, W = episode.frames.shape[1:]
    pos_box = box_around(peak_cells[i][0], peak_cells[i][1], theta.target_size, H, W)
    theta_new = update_appearance_at(theta, episode.frame(i), pos_box, cfg)

    d_plus = d_minus = n = 0
    for j in range(i + 1, T):
        if n == lookahead:
            break
        if not episode.gt.visible(j):
            continue
        n += 1
        feats = features(episode.frames[j])
        gt_box = episode.gt.box(j)
        gtc = gt_box.center()
        if score_at(theta_new, feats, gtc) > score_at(theta, feats, gtc):
            d_plus += 1
        peak_box = box_around(peak_cells[j][0], peak_cells[j][1],
                              theta.target_size, H, W)
        if iou(peak_box, gt_box) < IOU_HIT:
            wrong = peak_cells[j]
            if score_at(theta_new, feats, wrong) < score_at(theta, feats, wrong):
                d_minus += 1
    return UpdateEvidence(update_decision(d_plus, d_minus, n), d_plus, d_minus, n)


def geometric_return(remaining: float, gamma: float) -> float:
    """Sum of gamma^k for k in [0, remaining); remaining = inf gives 1/(1-gamma)."""
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must be in [0, 1)")
    if remaining < 0:
        raise ValueError("remaining must be >= 0")
    if math.isinf(remaining):
        return 1.0 / (1.0 - gamma)
    if gamma == 0.0:
        return 1.0 if remaining >= 1 else 0.0
    return (1.0 - gamma ** remaining) / (1.0 - gamma)


def q_init_target(a: Action, a_star: Action, remaining: float, gamma: float
                  ) -> tuple[float, float]:
    """Per-axis value seed: the full discounted return if the axis agrees
    with the heuristic label, else 0."""
    g = geometric_return(remaining, gamma)
    return (
        g if a.motion is a_star.motion else 0.0,
        g if a.appearance is a_star.appearance else 0.0,
    )


# ------------------------------------------------------------ label records

@dataclass(frozen=True)
class LabelRecord:
    episode_id: str
    frame: int
    motion_label: Optional[MotionChoice]
    appearance_label: AppearanceChoice
    delta_plus: int
    delta_minus: int
    n: int


def write_labels(path, records: Sequence[LabelRecord]) -> None:
    """JSON Lines, one record per labeled frame."""
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps({
                "episode_id": r.episode_id,
                "frame": r.frame,
                "motion_label": None if r.motion_label is None else r.motion_label.name,
                "appearance_label": r.appearance_label.name,
                "delta_plus": r.delta_plus,
                "delta_minus": r.delta_minus,
                "n": r.n,
            }) + "\n")


def read_labels(path) -> list[LabelRecord]:
    out: list[LabelRecord] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            out.append(LabelRecord(
                episode_id=d["episode_id"],
                frame=int(d["frame"]),
                motion_label=(None if d["motion_label"] is None
                              else MotionChoice[d["motion_label"]]),
                appearance_label=AppearanceChoice[d["appearance_label"]],
                delta_plus=int(d["delta_plus"]),
                delta_minus=int(d["delta_minus"]),
                n=int(d["n"]),
            ))
    return out
