"""Action oracles: online baseline, offline ground-truth labels, value seeds."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ptrack import heuristics as hx
from ptrack.backend import BackendConfig, init_belief
from ptrack.core import (
    Action,
    AgentState,
    AppearanceChoice,
    Belief,
    BoundingBox,
    MotionChoice,
    TRACK_UPDATE,
)
from ptrack.sim import GroundTruth, generate_episode, preset


def _state_with_max(m):
    h = np.zeros((10, 10), dtype=np.float32)
    h[4, 4] = m
    belief = Belief(appearance=None, heatmap=h)
    return AgentState(belief=belief, frame=None)


# ----------------------------------------------------------- online baseline

def test_online_high_confidence_updates():
    assert hx.online_action(_state_with_max(0.9), 0.5) == TRACK_UPDATE


def test_online_low_confidence_ignores():
    a = hx.online_action(_state_with_max(0.1), 0.5)
    assert a == Action(MotionChoice.TRACK, AppearanceChoice.IGNORE)


def test_online_threshold_inclusive():
    a = hx.online_action(_state_with_max(0.5), 0.5)
    assert a.appearance is AppearanceChoice.UPDATE


def test_online_never_reinitializes():
    for m in (0.0, 0.2, 0.5, 1.0):
        assert hx.online_action(_state_with_max(m), 0.5).motion is MotionChoice.TRACK


# ------------------------------------------------------------- motion labels

def _gt_one_frame(box, occluded=False):
    return GroundTruth(boxes=[box], occluded=np.array([occluded]),
                       cut=np.array([False]))


def test_motion_label_track_on_overlap():
    h = np.zeros((40, 40), dtype=np.float32)
    h[20, 20] = 1.0
    gt = _gt_one_frame(BoundingBox(x=16, y=16, w=9, h=9))  # centered at (20,20)
    assert hx.offline_motion_label(h, gt, 0, (9, 9)) is MotionChoice.TRACK


def test_motion_label_reinit_when_peak_misses():
    h = np.zeros((40, 40), dtype=np.float32)
    h[5, 5] = 1.0
    gt = _gt_one_frame(BoundingBox(x=26, y=26, w=9, h=9))
    assert hx.offline_motion_label(h, gt, 0, (9, 9)) is MotionChoice.REINIT


def test_motion_label_skip_when_invisible():
    h = np.zeros((40, 40), dtype=np.float32)
    h[5, 5] = 1.0
    gt = _gt_one_frame(BoundingBox(x=4, y=4, w=9, h=9), occluded=True)
    assert hx.offline_motion_label(h, gt, 0, (9, 9)) is None
    assert hx.offline_motion_label(h, gt, 0, (9, 9),
                                   invisible_reinit=True) is MotionChoice.REINIT


def test_motion_label_iou_boundary_inclusive():
    # Identical boxes: IoU exactly 1; half-overlap cases covered by core tests.
    h = np.zeros((40, 40), dtype=np.float32)
    h[10, 10] = 1.0
    gt = _gt_one_frame(BoundingBox(x=6, y=6, w=9, h=9))
    assert hx.offline_motion_label(h, gt, 0, (9, 9)) is MotionChoice.TRACK


# ----------------------------------------------------------- update decision

def test_update_decision_spec_examples():
    assert hx.update_decision(20, 0, 30) is AppearanceChoice.UPDATE
    assert hx.update_decision(10, 5, 30) is AppearanceChoice.IGNORE  # 15 not > 15
    assert hx.update_decision(16, 0, 30) is AppearanceChoice.UPDATE
    assert hx.update_decision(0, 0, 0) is AppearanceChoice.IGNORE


# ------------------------------------------------- counterfactual refit label

CFG = BackendConfig()


def _tracked_peaks(episode):
    """Pretend-perfect run: peak at the ground-truth center each frame."""
    H, W = episode.frames.shape[1:]
    cells = []
    last = (H // 2, W // 2)
    for i in range(len(episode)):
        b = episode.gt.box(i)
        if b is not None:
            last = b.center()
        cells.append(last)
    return cells


def test_update_label_prefers_refit_under_drift():
    spec = preset("short_term", appearance_drift_rate=0.06, occlusion_rate=0.0,
                  pixel_noise_sigma=0.005, illum_sigma=0.0, seed=21)
    ep = generate_episode(spec)
    belief = init_belief(ep.frame(0), ep.gt.box(0), CFG)
    cells = _tracked_peaks(ep)
    ev = hx.offline_update_label(belief.appearance, ep, 40, cells, CFG)
    assert ev.n == 30
    assert ev.choice is AppearanceChoice.UPDATE
    assert ev.delta_plus > 15


def test_update_label_rejects_refit_at_wrong_location():
    spec = preset("short_term", appearance_drift_rate=0.0, occlusion_rate=0.0,
                  pixel_noise_sigma=0.005, illum_sigma=0.0, seed=22)
    ep = generate_episode(spec)
    belief = init_belief(ep.frame(0), ep.gt.box(0), CFG)
    cells = _tracked_peaks(ep)
    wrong = list(cells)
    gt_c = ep.gt.box(40).center()
    wrong[40] = (5, 5) if abs(gt_c[0] - 5) + abs(gt_c[1] - 5) > 30 else (66, 90)
    ev = hx.offline_update_label(belief.appearance, ep, 40, wrong, CFG)
    assert ev.choice is AppearanceChoice.IGNORE


def test_update_label_no_future_frames_ignores():
    spec = preset("short_term", episode_len=50, seed=3)
    ep = generate_episode(spec)
    belief = init_belief(ep.frame(0), ep.gt.box(0), CFG)
    cells = _tracked_peaks(ep)
    ev = hx.offline_update_label(belief.appearance, ep, 49, cells, CFG)
    assert ev == hx.UpdateEvidence(AppearanceChoice.IGNORE, 0, 0, 0)


def test_update_label_window_truncates_at_episode_end():
    spec = preset("short_term", episode_len=50, seed=4)
    ep = generate_episode(spec)
    belief = init_belief(ep.frame(0), ep.gt.box(0), CFG)
    cells = _tracked_peaks(ep)
    ev = hx.offline_update_label(belief.appearance, ep, 45, cells, CFG)
    assert ev.n == 4


def test_update_label_pure():
    spec = preset("short_term", seed=5, episode_len=80)
    ep = generate_episode(spec)
    belief = init_belief(ep.frame(0), ep.gt.box(0), CFG)
    cells = _tracked_peaks(ep)
    a = hx.offline_update_label(belief.appearance, ep, 20, cells, CFG)
    b = hx.offline_update_label(belief.appearance, ep, 20, cells, CFG)
    assert a == b


# ------------------------------------------------------------- value seeding

def test_geometric_return_examples():
    assert hx.geometric_return(math.inf, 0.95) == pytest.approx(20.0, abs=1e-12)
    assert hx.geometric_return(3, 0.95) == pytest.approx(2.8525, abs=1e-12)
    assert hx.geometric_return(0, 0.95) == 0.0
    assert hx.geometric_return(1, 0.0) == 1.0


def test_geometric_return_matches_direct_sum():
    rng = np.random.default_rng(0)
    for _ in range(100):
        gamma = float(rng.uniform(0.0, 0.999))
        remaining = int(rng.integers(0, 400))
        direct = sum(gamma ** k for k in range(remaining))
        assert abs(hx.geometric_return(remaining, gamma) - direct) <= 1e-9


def test_geometric_return_validates():
    with pytest.raises(ValueError):
        hx.geometric_return(5, 1.0)
    with pytest.raises(ValueError):
        hx.geometric_return(-1, 0.5)


def test_q_init_target_match_and_mismatch():
    a_star = TRACK_UPDATE
    m, ap = hx.q_init_target(TRACK_UPDATE, a_star, math.inf, 0.95)
    assert m == pytest.approx(20.0) and ap == pytest.approx(20.0)
    mixed = Action(MotionChoice.REINIT, AppearanceChoice.UPDATE)
    m, ap = hx.q_init_target(mixed, a_star, 3, 0.95)
    assert m == 0.0 and ap == pytest.approx(2.8525)


@settings(max_examples=100, deadline=None)
@given(gamma=st.floats(0.0, 0.99), remaining=st.integers(1, 1000))
def test_heuristic_action_always_seeded_strictly_higher(gamma, remaining):
    a_star = Action(MotionChoice.REINIT, AppearanceChoice.IGNORE)
    match_m, match_a = hx.q_init_target(a_star, a_star, remaining, gamma)
    other = TRACK_UPDATE
    miss_m, miss_a = hx.q_init_target(other, a_star, remaining, gamma)
    assert match_m > miss_m and match_a > miss_a


# ------------------------------------------------------------- label records

def test_label_jsonl_roundtrip(tmp_path):
    records = [
        hx.LabelRecord("ep-1", 0, MotionChoice.TRACK, AppearanceChoice.UPDATE, 20, 0, 30),
        hx.LabelRecord("ep-1", 50, None, AppearanceChoice.IGNORE, 0, 0, 30),
        hx.LabelRecord("ep-2", 100, MotionChoice.REINIT, AppearanceChoice.IGNORE, 3, 4, 30),
    ]
    path = tmp_path / "labels.jsonl"
    hx.write_labels(path, records)
    assert hx.read_labels(path) == records
    lines = path.read_text().strip().split("\n")
    assert len(lines) == 3
    import json
    d = json.loads(lines[1])
    assert d["motion_label"] is None and d["appearance_label"] == "IGNORE"
