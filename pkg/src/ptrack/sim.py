"""Synthetic grayscale streaming-video world with ground truth.

Episodes are bit-reproducible functions of a ScenarioSpec: all randomness
comes from numpy PCG64 generators seeded from spec.seed with one named
stream per concern, so changing how one concern consumes randomness never
perturbs the others.

    stream 0 "motion"      target random walk
    stream 1 "texture"     background fields, target/distractor textures, drift
    stream 2 "events"      cut schedule, occlusion schedule and event params
    stream 3 "sensor"      per-frame illumination gain/bias and pixel noise
    stream 4 "distractor"  distractor walks and teleports

World model per frame: static per-scene background, moving textured
distractors (target-like texture plus noise), the drifting-texture target,
attached occluder rectangles (full cover -> flagged occluded; partial cover
of 40-80% target area -> not flagged), then global illumination gain/bias
and iid pixel noise, clipped to [0, 1].

Cuts teleport the target at least a quarter frame-diagonal away and redraw
the scene (new background, teleported distractors).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .core import BoundingBox, Frame, box_around, iou

_STREAMS = {"motion": 0, "texture": 1, "events": 2, "sensor": 3, "distractor": 4}

# Partial occlusions run at half the full-occlusion event rate.
_PARTIAL_RATE_FACTOR = 0.5
_OCCLUDER_SHADE = 0.08
_BG_CELL = 8  # background is a bilinear-upsampled coarse noise grid


@dataclass(frozen=True)
class ScenarioSpec:
    """Everything that determines an episode, including the seed."""

    frame_size: tuple[int, int] = (72, 96)  # (H, W)
    episode_len: int = 600
    target_size: tuple[int, int] = (12, 12)  # (w, h)
    motion_step_sigma: float = 2.0
    appearance_drift_rate: float = 0.008
    n_distractors: int = 2
    occlusion_rate: float = 0.5  # events per 100 frames
    occlusion_len: tuple[int, int] = (4, 12)  # (min, max) frames
    cut_rate: float = 0.0  # events per 100 frames
    illum_sigma: float = 0.05
    pixel_noise_sigma: float = 0.02
    seed: int = 0

    def __post_init__(self) -> None:
        H, W = self.frame_size
        tw, th = self.target_size
        if self.episode_len < 2:
            raise ValueError("episode_len must be >= 2")
        if tw <= 0 or th <= 0 or tw > W or th > H:
            raise ValueError(f"target {self.target_size} cannot fit frame {self.frame_size}")
        if self.occlusion_rate < 0 or self.cut_rate < 0:
            raise ValueError("event rates must be >= 0")
        lo, hi = self.occlusion_len
        if lo < 1 or hi < lo:
            raise ValueError(f"bad occlusion_len {self.occlusion_len}")
        for name in ("motion_step_sigma", "appearance_drift_rate", "illum_sigma", "pixel_noise_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


def preset(name: str, **overrides) -> ScenarioSpec:
    """Named scenario presets; unknown names are an error."""
    if name == "short_term":
        base = ScenarioSpec(occlusion_rate=0.5, cut_rate=0.0)
    elif name == "long_term":
        base = ScenarioSpec(occlusion_rate=4.0, cut_rate=1.0)
    else:
        raise ValueError(f"unknown preset {name!r}")
    return replace(base, **overrides) if overrides else base


@dataclass
class GroundTruth:
    """Per-frame annotation; the box is recorded even while occluded."""

    boxes: list[Optional[BoundingBox]]
    occluded: np.ndarray  # (T,) bool
    cut: np.ndarray  # (T,) bool

    def __len__(self) -> int:
        return len(self.boxes)

    def box(self, i: int) -> Optional[BoundingBox]:
        return self.boxes[i]

    def visible(self, i: int) -> bool:
        return self.boxes[i] is not None and not bool(self.occluded[i])


@dataclass
class Episode:
    frames: np.ndarray  # (T, H, W) float32 in [0, 1]
    gt: GroundTruth
    spec: Optional[ScenarioSpec] = None
    episode_id: str = ""

    def __len__(self) -> int:
        return self.frames.shape[0]

    def frame(self, i: int) -> Frame:
        return Frame(index=i, pixels=self.frames[i])


def _stream(seed: int, name: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, _STREAMS[name]))))


def _coarse_field(rng: np.random.Generator, H: int, W: int) -> np.ndarray:
    """Smooth background: coarse uniform grid, bilinearly upsampled."""
    gh = H // _BG_CELL + 2
    gw = W // _BG_CELL + 2
    grid = rng.uniform(0.2, 0.6, size=(gh, gw))
    ys = np.arange(H) / _BG_CELL
    xs = np.arange(W) / _BG_CELL
    y0 = ys.astype(int)
    x0 = xs.astype(int)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = grid[y0][:, x0]
    b = grid[y0][:, x0 + 1]
    c = grid[y0 + 1][:, x0]
    d = grid[y0 + 1][:, x0 + 1]
    return (a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx + c * fy * (1 - fx) + d * fy * fx)


@dataclass
class _EventPlan:
    cut: np.ndarray  # (T,) bool
    occluded: np.ndarray  # (T,) bool, full occlusions
    partial: list[tuple[int, int, float, int]]  # (start, end, cover_frac, side)


def _schedule_intervals(rng: np.random.Generator, T: int, rate: float,
                        len_range: tuple[int, int]) -> list[tuple[int, int]]:
    """Start/length schedule whose *measured* event rate matches `rate`/100.

    Inter-event gaps are geometric with mean chosen so that gap + mean length
    equals the nominal event period, compensating for occupancy.
    """
    if rate <= 0:
        return []
    lo, hi = len_range
    mean_len = (lo + hi) / 2.0
    period = 100.0 / rate
    p = 1.0 / max(1.0, period - mean_len)
    p = min(p, 0.9)
    out = []
    pos = int(rng.geometric(p))
    while pos < T:
        length = int(rng.integers(lo, hi + 1))
        end = min(pos + length, T)
        out.append((pos, end))
        pos = end + int(rng.geometric(p))
    return out


def _plan_events(spec: ScenarioSpec) -> _EventPlan:
    rng = _stream(spec.seed, "events")
    T = spec.episode_len
    cut = np.zeros(T, dtype=bool)
    if spec.cut_rate > 0:
        cut[1:] = rng.random(T - 1) < (spec.cut_rate / 100.0)
    occluded = np.zeros(T, dtype=bool)
    for s, e in _schedule_intervals(rng, T, spec.occlusion_rate, spec.occlusion_len):
        cuts_inside = np.nonzero(cut[s + 1:e])[0]
        if cuts_inside.size:
            e = s + 1 + int(cuts_inside[0])  # the scene change ends the occlusion
        occluded[s:e] = True
    partial = []
    for s, e in _schedule_intervals(rng, T, spec.occlusion_rate * _PARTIAL_RATE_FACTOR,
                                    spec.occlusion_len):
        cuts_inside = np.nonzero(cut[s + 1:e])[0]
        if cuts_inside.size:
            e = s + 1 + int(cuts_inside[0])
        frac = float(rng.uniform(0.4, 0.8))
        side = int(rng.integers(0, 4))  # which side of the target gets covered
        partial.append((s, e, frac, side))
    return _EventPlan(cut=cut, occluded=occluded, partial=partial)


def _draw_patch(canvas: np.ndarray, box: BoundingBox, patch: np.ndarray) -> None:
    canvas[box.y:box.y + box.h, box.x:box.x + box.w] = patch[:box.h, :box.w]


def _fill_rect(canvas: np.ndarray, y0: int, x0: int, y1: int, x1: int, value: float) -> None:
    H, W = canvas.shape
    y0, y1 = max(0, y0), min(H, y1)
    x0, x1 = max(0, x0), min(W, x1)
    if y0 < y1 and x0 < x1:
        canvas[y0:y1, x0:x1] = value


def _partial_occluder_rect(box: BoundingBox, frac: float, side: int) -> tuple[int, int, int, int]:
    """Rectangle covering `frac` of the box area, flush with one side."""
    if side in (0, 1):  # cover from top / bottom
        hh = max(1, min(box.h - 1, round(box.h * frac)))
        if side == 0:
            return (box.y - 2, box.x - 2, box.y + hh, box.x + box.w + 2)
        return (box.y + box.h - hh, box.x - 2, box.y + box.h + 2, box.x + box.w + 2)
    ww = max(1, min(box.w - 1, round(box.w * frac)))
    if side == 2:
        return (box.y - 2, box.x - 2, box.y + box.h + 2, box.x + ww)
    return (box.y - 2, box.x + box.w - ww, box.y + box.h + 2, box.x + box.w + 2)


def generate_episode(spec: ScenarioSpec) -> Episode:
    """Render a full episode; deterministic and bit-identical per spec."""
    H, W = spec.frame_size
    tw, th = spec.target_size
    T = spec.episode_len
    diag = math.hypot(H, W)

    motion_rng = _stream(spec.seed, "motion")
    texture_rng = _stream(spec.seed, "texture")
    sensor_rng = _stream(spec.seed, "sensor")
    distractor_rng = _stream(spec.seed, "distractor")
    plan = _plan_events(spec)

    # valid float range for target-center coordinates (box stays in frame)
    cy_lo, cy_hi = float(th // 2), float(H - th + th // 2)
    cx_lo, cx_hi = float(tw // 2), float(W - tw + tw // 2)
    max_step = max(0.0, 3.0 * spec.motion_step_sigma - 0.5)

    background = _coarse_field(texture_rng, H, W)
    target_tex = texture_rng.uniform(0.45, 1.0, size=(th, tw))
    distractor_tex = [
        np.clip(target_tex + texture_rng.normal(0.0, 0.15, size=(th, tw)), 0.0, 1.0)
        for _ in range(spec.n_distractors)
    ]

    cy = float(motion_rng.uniform(cy_lo, cy_hi)) if cy_hi > cy_lo else cy_lo
    cx = float(motion_rng.uniform(cx_lo, cx_hi)) if cx_hi > cx_lo else cx_lo
    dist_pos = [(float(distractor_rng.uniform(cy_lo, cy_hi)) if cy_hi > cy_lo else cy_lo,
                 float(distractor_rng.uniform(cx_lo, cx_hi)) if cx_hi > cx_lo else cx_lo)
                for _ in range(spec.n_distractors)]

    frames = np.empty((T, H, W), dtype=np.float32)
    boxes: list[Optional[BoundingBox]] = []
    prev_center: Optional[tuple[int, int]] = None

    for i in range(T):
        if i > 0:
            if plan.cut[i]:
                # teleport far away; scene is redrawn below
                best = None
                for _ in range(200):
                    ny = float(motion_rng.uniform(cy_lo, cy_hi)) if cy_hi > cy_lo else cy_lo
                    nx = float(motion_rng.uniform(cx_lo, cx_hi)) if cx_hi > cx_lo else cx_lo
                    cand = box_around(round(ny), round(nx), (tw, th), H, W).center()
                    d = math.hypot(cand[0] - prev_center[0], cand[1] - prev_center[1])
                    if best is None or d > best[0]:
                        best = (d, ny, nx)
                    if d >= diag / 4.0:
                        break
                cy, cx = best[1], best[2]
                background = _coarse_field(texture_rng, H, W)
                dist_pos = [
                    (float(distractor_rng.uniform(cy_lo, cy_hi)) if cy_hi > cy_lo else cy_lo,
                     float(distractor_rng.uniform(cx_lo, cx_hi)) if cx_hi > cx_lo else cx_lo)
                    for _ in range(spec.n_distractors)]
            else:
                dy = float(motion_rng.normal(0.0, spec.motion_step_sigma))
                dx = float(motion_rng.normal(0.0, spec.motion_step_sigma))
                norm = math.hypot(dy, dx)
                if norm > max_step and norm > 0:
                    dy *= max_step / norm
                    dx *= max_step / norm
                cy = min(max(cy + dy, cy_lo), cy_hi)
                cx = min(max(cx + dx, cx_lo), cx_hi)
            # texture drift (always consumed in the same stream order)
            if spec.appearance_drift_rate > 0:
                fresh = texture_rng.uniform(0.45, 1.0, size=(th, tw))
                target_tex = (1.0 - spec.appearance_drift_rate) * target_tex \
                    + spec.appearance_drift_rate * fresh
            new_dist = []
            for (py, px) in dist_pos:
                ddy = float(distractor_rng.normal(0.0, spec.motion_step_sigma))
                ddx = float(distractor_rng.normal(0.0, spec.motion_step_sigma))
                new_dist.append((min(max(py + ddy, cy_lo), cy_hi),
                                 min(max(px + ddx, cx_lo), cx_hi)))
            dist_pos = new_dist

        box = box_around(round(cy), round(cx), (tw, th), H, W)
        boxes.append(box)
        prev_center = box.center()

        canvas = background.copy()
        for k, (py, px) in enumerate(dist_pos):
            dbox = box_around(round(py), round(px), (tw, th), H, W)
            _draw_patch(canvas, dbox, distractor_tex[k])
        _draw_patch(canvas, box, target_tex)
        if plan.occluded[i]:
            _fill_rect(canvas, box.y - 2, box.x - 2, box.y + box.h + 2, box.x + box.w + 2,
                       _OCCLUDER_SHADE)
        for (s, e, frac, side) in plan.partial:
            if s <= i < e:
                y0, x0, y1, x1 = _partial_occluder_rect(box, frac, side)
                _fill_rect(canvas, y0, x0, y1, x1, _OCCLUDER_SHADE)

        gain = 1.0 + spec.illum_sigma * float(sensor_rng.normal())
        bias = 0.2 * spec.illum_sigma * float(sensor_rng.normal())
        canvas = canvas * gain + bias
        if spec.pixel_noise_sigma > 0:
            canvas = canvas + sensor_rng.normal(0.0, spec.pixel_noise_sigma, size=(H, W))
        frames[i] = np.clip(canvas, 0.0, 1.0).astype(np.float32)

    gt = GroundTruth(boxes=boxes, occluded=plan.occluded, cut=plan.cut)
    return Episode(frames=frames, gt=gt, spec=spec, episode_id=f"sim-{spec.seed}")


def oracle_reward(gt: GroundTruth, i: int, reported: Optional[BoundingBox],
                  iou_threshold: float = 0.5) -> int:
    """1 for a correct frame: hit a visible target (IoU >= threshold, inclusive)
    or abstained while the target was not visible; else 0."""
    if gt.visible(i):
        return int(reported is not None and iou(reported, gt.box(i)) >= iou_threshold)
    return int(reported is None)


# ------------------------------------------------------------------ export/import

def export_episode(ep: Episode, out_dir: str | Path) -> Path:
    """Write frames/<i>.png (8-bit grayscale) plus ground_truth.json."""
    from PIL import Image

    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    for i in range(len(ep)):
        arr = np.round(ep.frames[i] * 255.0).astype(np.uint8)
        Image.fromarray(arr, mode="L").save(out / "frames" / f"{i:06d}.png")
    records = []
    for i in range(len(ep)):
        b = ep.gt.box(i)
        records.append({
            "i": i,
            "box": list(b.as_tuple()) if b is not None else None,
            "occluded": bool(ep.gt.occluded[i]),
            "cut": bool(ep.gt.cut[i]),
        })
    (out / "ground_truth.json").write_text(json.dumps({"frames": records}, indent=1))
    if ep.spec is not None:
        meta = {k: getattr(ep.spec, k) for k in ScenarioSpec.__dataclass_fields__}
        (out / "spec.json").write_text(json.dumps(meta, indent=1))
    return out


def import_episode(in_dir: str | Path) -> Episode:
    """Load an episode previously written by export_episode (same layout)."""
    from PIL import Image

    src = Path(in_dir)
    gt_doc = json.loads((src / "ground_truth.json").read_text())
    records = sorted(gt_doc["frames"], key=lambda r: r["i"])
    T = len(records)
    if T == 0:
        raise ValueError(f"no frames recorded in {src}")
    first = np.asarray(Image.open(src / "frames" / f"{records[0]['i']:06d}.png"))
    frames = np.empty((T, *first.shape), dtype=np.float32)
    boxes: list[Optional[BoundingBox]] = []
    occluded = np.zeros(T, dtype=bool)
    cut = np.zeros(T, dtype=bool)
    for k, rec in enumerate(records):
        arr = np.asarray(Image.open(src / "frames" / f"{rec['i']:06d}.png"), dtype=np.float32)
        frames[k] = arr / 255.0
        boxes.append(BoundingBox(*rec["box"]) if rec["box"] is not None else None)
        occluded[k] = bool(rec["occluded"])
        cut[k] = bool(rec["cut"])
    spec = None
    spec_path = src / "spec.json"
    if spec_path.exists():
        doc = json.loads(spec_path.read_text())
        for key in ("frame_size", "target_size", "occlusion_len"):
            doc[key] = tuple(doc[key])
        spec = ScenarioSpec(**doc)
    return Episode(frames=frames, gt=GroundTruth(boxes, occluded, cut), spec=spec,
                   episode_id=src.name)
