"""Correlation-filter tracking backend over hand-crafted features.

Feature map: 3 channels per pixel — centered intensity plus horizontal and
vertical central-difference gradients (replicated borders) — all scaled by a
single global constant chosen so that the fixed-step appearance fit below is
a contraction on realistic patches (step size * patch curvature < 1).

The two motion primitives share one scoring routine and differ only in where
the search window comes from: `track` centers it on the previous heatmap
peak, `reinit` draws it uniformly at random. Both evaluate exactly the same
number of candidate placements, which is the per-frame compute budget.

Scores are raw rectified correlations (clamped at 0: negative correlation
carries no localization evidence), never normalized — downstream decisions
that want scale invariance normalize explicitly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import (
    Action,
    AppearanceChoice,
    AppearanceModel,
    Belief,
    BoundingBox,
    Frame,
    MotionChoice,
    argmax_cell,
    box_around,
    extract_box,
    iou,
)

N_CHANNELS = 3
FEATURE_SCALE = 0.3
_NEG_RING_FACTOR = 0.7  # first-try negative offset, in filter side lengths
_NEG_MAX_IOU = 0.3


@dataclass(frozen=True)
class BackendConfig:
    roi_ratio: float = 3.0  # search window side / max target side
    n_neg: int = 8
    eta_app: float = 0.05
    update_iters: int = 10
    report_threshold: float = 0.2

    def __post_init__(self) -> None:
        if self.roi_ratio <= 0 or self.eta_app <= 0:
            raise ValueError("roi_ratio and eta_app must be positive")
        if self.n_neg < 0 or self.update_iters < 0:
            raise ValueError("n_neg and update_iters must be >= 0")


@dataclass(frozen=True)
class Budget:
    candidates_evaluated: int


def filter_shape(target_size: tuple[int, int]) -> tuple[int, int]:
    """(fh, fw): target size rounded up to odd so the filter has a center."""
    w, h = target_size
    return (h | 1, w | 1)


def new_appearance_model(target_size: tuple[int, int]) -> AppearanceModel:
    fh, fw = filter_shape(target_size)
    return AppearanceModel(np.zeros((fh, fw, N_CHANNELS), dtype=np.float32), target_size)


def features(pixels: np.ndarray) -> np.ndarray:
    """(H, W, 3) float32 feature map for one grayscale frame in [0, 1]."""
    img = np.asarray(pixels, dtype=np.float32)
    padded = np.pad(img, 1, mode="edge")
    gx = (padded[1:-1, 2:] - padded[1:-1, :-2]) * 0.5
    gy = (padded[2:, 1:-1] - padded[:-2, 1:-1]) * 0.5
    out = np.empty((*img.shape, N_CHANNELS), dtype=np.float32)
    out[..., 0] = (img - 0.5) * FEATURE_SCALE
    out[..., 1] = gx * FEATURE_SCALE
    out[..., 2] = gy * FEATURE_SCALE
    return out


def roi_sides(cfg: BackendConfig, target_size: tuple[int, int],
              frame_shape: tuple[int, int]) -> tuple[int, int]:
    """Search-window side lengths (rows, cols), clamped to the frame."""
    side = round(cfg.roi_ratio * max(target_size))
    return (min(side, frame_shape[0]), min(side, frame_shape[1]))


def _windows(feats: np.ndarray, fh: int, fw: int) -> np.ndarray:
    """Zero-padded sliding windows: index [r, c] = support of a placement at (r, c)."""
    py, px = fh // 2, fw // 2
    padded = np.pad(feats, ((py, py), (px, px), (0, 0)))
    return np.lib.stride_tricks.sliding_window_view(padded, (fh, fw), axis=(0, 1))


def _roi_scores(feats: np.ndarray, filt: np.ndarray, y0: int, x0: int,
                sh: int, sw: int) -> np.ndarray:
    """Correlation scores of `filt` at every placement inside the window."""
    fh, fw, _ = filt.shape
    win = _windows(feats, fh, fw)[y0:y0 + sh, x0:x0 + sw]
    # (sh, sw, ch, fh, fw) -> rows of (fh, fw, ch) matching filt.ravel()
    mat = np.moveaxis(win, 2, 4).reshape(sh * sw, -1)
    return (mat @ filt.ravel()).reshape(sh, sw)


def _scored_heatmap(feats: np.ndarray, theta: AppearanceModel, y0: int, x0: int,
                    sh: int, sw: int) -> tuple[np.ndarray, Budget]:
    H, W, _ = feats.shape
    scores = _roi_scores(feats, theta.filter_weights, y0, x0, sh, sw)
    heat = np.zeros((H, W), dtype=np.float32)
    heat[y0:y0 + sh, x0:x0 + sw] = np.maximum(scores, 0.0)
    return heat, Budget(candidates_evaluated=sh * sw)


def track(h_prev: np.ndarray, theta: AppearanceModel, frame: Frame,
          cfg: BackendConfig, feats: Optional[np.ndarray] = None
          ) -> tuple[np.ndarray, Budget]:
    """Local search around the previous heatmap peak."""
    if feats is None:
        feats = features(frame.pixels)
    H, W, _ = feats.shape
    sh, sw = roi_sides(cfg, theta.target_size, (H, W))
    r, c = argmax_cell(h_prev)
    y0 = min(max(r - sh // 2, 0), H - sh)
    x0 = min(max(c - sw // 2, 0), W - sw)
    return _scored_heatmap(feats, theta, y0, x0, sh, sw)


def reinit(theta: AppearanceModel, frame: Frame, cfg: BackendConfig,
           rng: np.random.Generator, feats: Optional[np.ndarray] = None
           ) -> tuple[np.ndarray, Budget]:
    """Same search with the window placed uniformly at random."""
    if feats is None:
        feats = features(frame.pixels)
    H, W, _ = feats.shape
    sh, sw = roi_sides(cfg, theta.target_size, (H, W))
    y0 = int(rng.integers(0, H - sh + 1))
    x0 = int(rng.integers(0, W - sw + 1))
    return _scored_heatmap(feats, theta, y0, x0, sh, sw)


def _patch_at(feats: np.ndarray, center: tuple[int, int], fh: int, fw: int) -> np.ndarray:
    H, W, _ = feats.shape
    box = box_around(center[0], center[1], (fw, fh), H, W)
    return feats[box.y:box.y + fh, box.x:box.x + fw]


def score_at(theta: AppearanceModel, feats: np.ndarray, center: tuple[int, int]
             ) -> float:
    """Raw (unrectified) correlation score of the filter at one location."""
    fh, fw = theta.filter_weights.shape[:2]
    patch = _patch_at(feats, center, fh, fw)
    return float(np.vdot(theta.filter_weights, patch))


def negative_boxes(pos: BoundingBox, n_neg: int, frame_shape: tuple[int, int]
                   ) -> list[BoundingBox]:
    """Up to n_neg same-size boxes ringed around `pos`, each with IoU < 0.3.

    Deterministic: 8 compass directions, radius grown until the overlap
    constraint holds after clamping into the frame; directions that cannot
    satisfy it (tiny frames) are dropped.
    """
    H, W = frame_shape
    cy, cx = pos.center()
    dirs = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]
    out: list[BoundingBox] = []
    for k in range(n_neg):
        dy, dx = dirs[k % len(dirs)]
        radius_y = math.ceil(_NEG_RING_FACTOR * pos.h) * (1 + k // len(dirs))
        radius_x = math.ceil(_NEG_RING_FACTOR * pos.w) * (1 + k // len(dirs))
        cand = None
        for _ in range(6):
            cand = box_around(cy + dy * radius_y, cx + dx * radius_x,
                              (pos.w, pos.h), H, W)
            if iou(cand, pos) < _NEG_MAX_IOU:
                break
            radius_y = math.ceil(radius_y * 1.4)
            radius_x = math.ceil(radius_x * 1.4)
            cand = None
        if cand is None:
            # clamping pinned this direction onto the positive (small frame);
            # fall back to the first grid cell that satisfies the bound
            taken = set(b.as_tuple() for b in out)
            for r in range(0, H, 2):
                for c in range(0, W, 2):
                    g = box_around(r, c, (pos.w, pos.h), H, W)
                    if iou(g, pos) < _NEG_MAX_IOU and g.as_tuple() not in taken:
                        cand = g
                        break
                if cand is not None:
                    break
            if cand is None and out:
                cand = out[-1]  # degenerate frame: reuse rather than under-count
        if cand is not None:
            out.append(cand)
    return out


def update_appearance_at(theta: AppearanceModel, frame: Frame, pos_box: BoundingBox,
                         cfg: BackendConfig, feats: Optional[np.ndarray] = None
                         ) -> AppearanceModel:
    """Fixed-iteration ridge-free fit of the filter at a given positive box.

    Loss: (score(positive) - 1)^2 + sum_neg score(neg)^2, minimized with
    `update_iters` plain gradient steps of size eta_app. The patches stay
    fixed during the fit; only the filter moves.
    """
    if feats is None:
        feats = features(frame.pixels)
    H, W, _ = feats.shape
    fh, fw = theta.filter_weights.shape[:2]
    pos_patch = _patch_at(feats, pos_box.center(), fh, fw)
    neg_boxes = negative_boxes(
        box_around(*pos_box.center(), (fw, fh), H, W), cfg.n_neg, (H, W))
    neg_patches = [_patch_at(feats, nb.center(), fh, fw) for nb in neg_boxes]

    w = theta.filter_weights.astype(np.float32).copy()
    pos = pos_patch.astype(np.float32)
    negs = np.stack(neg_patches).astype(np.float32) if neg_patches else None
    for _ in range(cfg.update_iters):
        grad = 2.0 * (float(np.vdot(w, pos)) - 1.0) * pos
        if negs is not None:
            neg_scores = np.tensordot(negs, w, axes=([1, 2, 3], [0, 1, 2]))
            grad = grad + 2.0 * np.tensordot(neg_scores, negs, axes=(0, 0))
        w = w - np.float32(cfg.eta_app) * grad
    return AppearanceModel(w, theta.target_size)


def update_appearance(theta: AppearanceModel, h: np.ndarray, frame: Frame,
                      cfg: BackendConfig, feats: Optional[np.ndarray] = None
                      ) -> AppearanceModel:
    """Fit at the current heatmap peak (the reported target location)."""
    pos_box = extract_box(h, theta.target_size)
    return update_appearance_at(theta, frame, pos_box, cfg, feats=feats)


def delta_heatmap(frame_shape: tuple[int, int], box: BoundingBox) -> np.ndarray:
    """Heatmap that is 1 at the box center and 0 elsewhere."""
    h = np.zeros(frame_shape, dtype=np.float32)
    h[box.center()] = 1.0
    return h


def init_belief(frame0: Frame, init_box: BoundingBox, cfg: BackendConfig) -> Belief:
    """Manual initialization: delta heatmap at the given box, filter fitted there."""
    h = delta_heatmap(frame0.pixels.shape, init_box)
    theta = update_appearance_at(
        new_appearance_model((init_box.w, init_box.h)), frame0, init_box, cfg)
    return Belief(appearance=theta, heatmap=h)


def step_belief(belief: Belief, frame: Frame, action: Action, cfg: BackendConfig,
                rng: np.random.Generator, feats: Optional[np.ndarray] = None
                ) -> tuple[Belief, Budget]:
    """One belief update: heatmap first (TRACK or REINIT), then the filter
    (UPDATE consumes the new heatmap; IGNORE carries the filter unchanged)."""
    if feats is None:
        feats = features(frame.pixels)
    if action.motion is MotionChoice.TRACK:
        h, budget = track(belief.heatmap, belief.appearance, frame, cfg, feats=feats)
    else:
        h, budget = reinit(belief.appearance, frame, cfg, rng, feats=feats)
    if action.appearance is AppearanceChoice.UPDATE:
        theta = update_appearance(belief.appearance, h, frame, cfg, feats=feats)
    else:
        theta = belief.appearance  # bit-identical carry-over
    return Belief(appearance=theta, heatmap=h), budget
