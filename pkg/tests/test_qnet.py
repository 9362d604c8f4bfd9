"""Action-value network: forward vs naive-loop oracle, finite-difference
gradients at an engineered kink-free point, SGD recurrence, featurization
mass conservation, checkpoint format."""

import numpy as np
import pytest

from ptrack import qnet
from ptrack.core import AppearanceChoice, MotionChoice, normalize


# ------------------------------------------------------ naive forward oracle

def naive_conv_same(x, w, b):
    """Cross-correlation with same padding (7 before, 8 after), plain loops."""
    N, Cin, H, _ = x.shape
    Cout, _, K, _ = w.shape
    pb = K // 2 - 1
    xp = np.zeros((N, Cin, H + K - 1, H + K - 1), dtype=np.float64)
    xp[:, :, pb:pb + H, pb:pb + H] = x
    out = np.zeros((N, Cout, H, H))
    for n in range(N):
        for o in range(Cout):
            for p in range(H):
                for q in range(H):
                    acc = 0.0
                    for c in range(Cin):
                        acc += float(np.sum(xp[n, c, p:p + K, q:q + K] * w[o, c]))
                    out[n, o, p, q] = acc + b[o]
    return out


def naive_pool4(a):
    N, C, H, W = a.shape
    out = np.zeros((N, C, H // 4, W // 4))
    for n in range(N):
        for c in range(C):
            for i in range(H // 4):
                for j in range(W // 4):
                    out[n, c, i, j] = a[n, c, 4 * i:4 * i + 4, 4 * j:4 * j + 4].max()
    return out


def naive_forward(net, planes):
    p = {k: v.astype(np.float64) for k, v in net.params.items()}
    x = planes.reshape(-1, 1, 64, 64).astype(np.float64) * qnet.INPUT_GAIN
    a1 = np.maximum(naive_conv_same(x, p["conv1_w"], p["conv1_b"]), 0)
    p1 = naive_pool4(a1)
    a2 = np.maximum(naive_conv_same(p1, p["conv2_w"], p["conv2_b"]), 0)
    feats = naive_pool4(a2).reshape(x.shape[0], 64)
    qm = feats @ p["fc_motion_w"].T + p["fc_motion_b"]
    qa = feats @ p["fc_appearance_w"].T + p["fc_appearance_b"]
    return qm, qa


def _random_planes(seed, n):
    rng = np.random.default_rng(seed)
    h = np.abs(rng.standard_normal((n, 64, 64))) ** 3
    return h / h.sum(axis=(1, 2), keepdims=True)


def test_forward_matches_naive_loop_oracle():
    net = qnet.init_net(3).astype(np.float64)
    planes = _random_planes(123, 2)
    qm, qa = qnet.forward_batch(net, planes)
    qm_ref, qa_ref = naive_forward(net, planes)
    assert np.abs(qm - qm_ref).max() <= 1e-9
    assert np.abs(qa - qa_ref).max() <= 1e-9


def test_forward_golden_values_frozen():
    # Pinned from the naive-loop oracle at this seed pair.
    rng = np.random.default_rng(123)
    net = qnet.init_net(3).astype(np.float64)
    h = np.abs(rng.standard_normal((48, 64))) ** 3
    plane = qnet.featurize_heatmap(h).astype(np.float64)
    q = qnet.forward(net, plane)
    np.testing.assert_allclose(
        q.motion, [-0.067368768075561, -0.1361942954283854], atol=1e-9)
    np.testing.assert_allclose(
        q.appearance, [0.12639275614333806, -0.11529083800684478], atol=1e-9)


def test_float32_path_close_to_float64():
    net = qnet.init_net(3)
    planes = _random_planes(7, 2).astype(np.float32)
    qm32, qa32 = qnet.forward_batch(net, planes)
    qm64, qa64 = qnet.forward_batch(net.astype(np.float64), planes.astype(np.float64))
    assert qm32.dtype == np.float32
    assert np.abs(qm32 - qm64).max() < 1e-6
    assert np.abs(qa32 - qa64).max() < 1e-6


def test_forward_pure_and_deterministic():
    net = qnet.init_net(9)
    planes = _random_planes(11, 3).astype(np.float32)
    before = planes.copy()
    qm1, qa1 = qnet.forward_batch(net, planes)
    qm2, qa2 = qnet.forward_batch(net, planes)
    assert np.array_equal(qm1, qm2) and np.array_equal(qa1, qa2)
    assert np.array_equal(planes, before)


def test_zero_weights_zero_output():
    net = qnet.init_net(0)
    for k in net.params:
        net.params[k] = np.zeros_like(net.params[k])
    q = qnet.forward(net, _random_planes(1, 1)[0].astype(np.float32))
    assert np.all(q.motion == 0.0) and np.all(q.appearance == 0.0)


def test_intermediate_shapes():
    net = qnet.init_net(2)
    planes = _random_planes(2, 3).astype(np.float32)
    qm, qa, cache = qnet.forward_batch(net, planes, want_cache=True)
    assert qm.shape == (3, 2) and qa.shape == (3, 2)
    assert cache.mask1.shape == (3, 4, 64, 64)
    assert cache.idx1.shape == (3, 4, 16, 16)
    assert cache.mask2.shape == (3, 4, 16, 16)
    assert cache.idx2.shape == (3, 4, 4, 4)
    assert cache.feats.shape == (3, 64)


# ----------------------------------------------------------- pooling details

def test_maxpool_tie_routes_to_first_row_major_cell():
    a = np.zeros((1, 1, 4, 4), dtype=np.float64)
    a[0, 0, 1, 2] = 5.0
    a[0, 0, 3, 1] = 5.0  # tie; (1,2) comes first row-major
    out, idx = qnet._pool_forward(a)
    assert out[0, 0, 0, 0] == 5.0
    assert idx[0, 0, 0, 0] == 1 * 4 + 2
    back = qnet._pool_backward(np.ones((1, 1, 1, 1)), idx, 4)
    assert back[0, 0, 1, 2] == 1.0
    assert back[0, 0, 3, 1] == 0.0
    assert back.sum() == 1.0


def test_pool_roundtrip_routing():
    rng = np.random.default_rng(5)
    a = rng.standard_normal((2, 4, 16, 16))
    out, idx = qnet._pool_forward(a)
    g = rng.standard_normal(out.shape)
    back = qnet._pool_backward(g, idx, 16)
    # Gradient lands exactly on each window's argmax cell.
    assert np.count_nonzero(back) == g.size
    np.testing.assert_allclose(qnet._pool_forward(np.where(back != 0, a, -np.inf))[0], out)


# -------------------------------------------------------------- grad checks

def gradcheck_point(seed):
    """A net/input pair where no ReLU or maxpool state can flip within the
    reach of a 1e-3 perturbation: all-positive kernels + a ramp input give
    every pool window a dominant cell by a provable margin."""
    rng = np.random.default_rng(seed)
    net = qnet.init_net(seed).astype(np.float64)
    for name in ("conv1_w", "conv2_w"):
        net.params[name] = 0.006 + 0.25 * np.abs(net.params[name])
    net.params["conv1_b"] = np.full(4, 0.5)
    net.params["conv2_b"] = np.full(4, 0.5)
    ii, jj = np.mgrid[0:64, 0:64].astype(np.float64)
    plane = (8.0 + ii + 4.7 * jj) / 16.0
    plane = plane + 0.02 * np.abs(rng.standard_normal((64, 64)))
    tm = rng.standard_normal((1, 2))
    ta = rng.standard_normal((1, 2))
    return net, plane[None], tm, ta


def assert_state_margins(net, planes):
    """Margins must dwarf the perturbation reach or the FD check is invalid."""
    x = planes.reshape(-1, 1, 64, 64)
    y1, _ = qnet._conv_forward(x, net.params["conv1_w"], net.params["conv1_b"])
    p1, _ = qnet._pool_forward(np.maximum(y1, 0))
    y2, _ = qnet._conv_forward(p1, net.params["conv2_w"], net.params["conv2_b"])

    def min_pool_gap(a):
        N, C, H, W = a.shape
        win = a.reshape(N, C, H // 4, 4, W // 4, 4)
        win = win.transpose(0, 1, 2, 4, 3, 5).reshape(N, C, H // 4, W // 4, 16)
        srt = np.sort(win, axis=-1)
        return float((srt[..., -1] - srt[..., -2]).min())

    assert float(np.abs(y1).min()) > 0.3
    assert float(np.abs(y2).min()) > 0.3
    assert min_pool_gap(np.maximum(y1, 0)) > 0.05
    assert min_pool_gap(np.maximum(y2, 0)) > 0.05


def run_gradcheck(seed, coords_per_tensor=64, eps=1e-3, tol=1e-4):
    net, planes, tm, ta = gradcheck_point(seed)
    assert_state_margins(net, planes)
    qm, qa, cache = qnet.forward_batch(net, planes, want_cache=True)
    grads = qnet.backward_batch(net, cache, tm, ta)
    rng = np.random.default_rng(seed + 10_000)
    worst = 0.0
    for name in qnet.PARAM_ORDER:
        flat = net.params[name].reshape(-1)
        if flat.size <= coords_per_tensor:
            idxs = np.arange(flat.size)
        else:
            idxs = rng.choice(flat.size, coords_per_tensor, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            qm1, qa1 = qnet.forward_batch(net, planes)
            lp = float(np.sum(qm1 * tm) + np.sum(qa1 * ta))
            flat[i] = orig - eps
            qm1, qa1 = qnet.forward_batch(net, planes)
            lm = float(np.sum(qm1 * tm) + np.sum(qa1 * ta))
            flat[i] = orig
            fd = (lp - lm) / (2 * eps)
            an = float(grads[name].reshape(-1)[i])
            rel = abs(fd - an) / max(1.0, abs(fd), abs(an))
            worst = max(worst, rel)
    assert worst <= tol, f"seed {seed}: worst relative error {worst:.3e}"
    return worst


def test_gradcheck_full_network():
    assert run_gradcheck(0) <= 1e-4


def test_zero_upstream_gradient_gives_zero_param_gradients():
    net = qnet.init_net(4).astype(np.float64)
    planes = _random_planes(4, 2)
    _, _, cache = qnet.forward_batch(net, planes, want_cache=True)
    grads = qnet.backward_batch(net, cache, np.zeros((2, 2)), np.zeros((2, 2)))
    for name in qnet.PARAM_ORDER:
        assert np.all(grads[name] == 0.0), name


def test_conv_layer_gradients_isolated():
    # Pure linear layer (no ReLU/pool), so FD at 1e-5 is exact to float noise.
    rng = np.random.default_rng(3)
    for H, Cin, Cout in [(64, 1, 4), (16, 4, 4)]:
        x = rng.standard_normal((2, Cin, H, H))
        w = rng.standard_normal((Cout, Cin, 16, 16)) * 0.05
        b = rng.standard_normal(Cout)
        t = rng.standard_normal((2, Cout, H, H))
        _, X = qnet._conv_forward(x, w, b)
        dw, db, dx = qnet._conv_backward(t, X, w, need_dx=True)
        np.testing.assert_allclose(db, t.sum(axis=(0, 2, 3)), atol=1e-9)
        eps = 1e-5
        for _ in range(12):
            o, c, u, v = (rng.integers(s) for s in w.shape)
            w2 = w.copy()
            w2[o, c, u, v] += eps
            yp, _ = qnet._conv_forward(x, w2, b)
            w2[o, c, u, v] -= 2 * eps
            ym, _ = qnet._conv_forward(x, w2, b)
            fd = float(np.sum(t * (yp - ym)) / (2 * eps))
            assert abs(fd - dw[o, c, u, v]) <= 1e-7 * max(1.0, abs(fd))
        for _ in range(12):
            n, c, i, j = (rng.integers(s) for s in x.shape)
            x2 = x.copy()
            x2[n, c, i, j] += eps
            yp, _ = qnet._conv_forward(x2, w, b)
            x2[n, c, i, j] -= 2 * eps
            ym, _ = qnet._conv_forward(x2, w, b)
            fd = float(np.sum(t * (yp - ym)) / (2 * eps))
            assert abs(fd - dx[n, c, i, j]) <= 1e-7 * max(1.0, abs(fd))


# ---------------------------------------------------------------------- sgd

def test_sgd_two_step_momentum_recurrence():
    # v1 = g, w1 = w0 - lr*g; v2 = 1.9g, w2 = w0 - lr*g*(1 + 1.9).
    net = qnet.init_net(1)
    w0 = {k: v.copy() for k, v in net.params.items()}
    grads = {k: np.full_like(v, 0.25) for k, v in net.params.items()}
    lr = 0.1
    qnet.sgd_step(net, grads, lr=lr, momentum=0.9, weight_decay=0.0)
    for k in w0:
        np.testing.assert_allclose(net.params[k], w0[k] - lr * 0.25, atol=1e-7)
    qnet.sgd_step(net, grads, lr=lr, momentum=0.9, weight_decay=0.0)
    for k in w0:
        np.testing.assert_allclose(net.params[k], w0[k] - lr * 0.25 * 2.9, atol=1e-6)


def test_sgd_weight_decay_enters_velocity():
    net = qnet.init_net(2)
    w0 = net.params["fc_motion_w"].copy()
    grads = {k: np.zeros_like(v) for k, v in net.params.items()}
    qnet.sgd_step(net, grads, lr=1.0, momentum=0.0, weight_decay=0.5)
    np.testing.assert_allclose(net.params["fc_motion_w"], w0 - 0.5 * w0, atol=1e-7)


def test_sgd_nonzero_gradient_changes_parameter():
    net = qnet.init_net(6)
    before = {k: v.copy() for k, v in net.params.items()}
    grads = {k: np.zeros_like(v) for k, v in net.params.items()}
    grads["conv2_w"] = np.ones_like(grads["conv2_w"])
    qnet.sgd_step(net, grads, lr=1e-4, momentum=0.9, weight_decay=0.0)
    assert not np.array_equal(net.params["conv2_w"], before["conv2_w"])
    assert np.array_equal(net.params["conv1_w"], before["conv1_w"])


def test_sgd_preserves_float32():
    net = qnet.init_net(8)
    grads = {k: np.ones_like(v) for k, v in net.params.items()}
    qnet.sgd_step(net, grads, lr=1e-4, momentum=0.9, weight_decay=1e-8)
    for k, v in net.params.items():
        assert v.dtype == np.float32, k
        assert net.velocity[k].dtype == np.float32, k


def test_clip_grads_scales_only_above_cap():
    grads = {"a": np.array([3.0, 0.0]), "b": np.array([[0.0, 4.0]])}
    norm = qnet.clip_grads_(grads, max_norm=10.0)  # norm 5, under the cap
    assert norm == pytest.approx(5.0)
    np.testing.assert_allclose(grads["a"], [3.0, 0.0])

    norm = qnet.clip_grads_(grads, max_norm=2.5)  # now scaled by half
    assert norm == pytest.approx(5.0)
    np.testing.assert_allclose(grads["a"], [1.5, 0.0])
    np.testing.assert_allclose(grads["b"], [[0.0, 2.0]])
    total = np.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    assert total == pytest.approx(2.5)


# ------------------------------------------------------------- featurization

def test_featurize_mass_conserved():
    rng = np.random.default_rng(0)
    for shape in [(64, 64), (72, 96), (128, 128), (40, 200), (64, 63)]:
        h = np.abs(rng.standard_normal(shape))
        plane = qnet.featurize_heatmap(h)
        assert plane.shape == (64, 64)
        assert plane.dtype == np.float32
        assert abs(float(plane.sum()) - 1.0) <= 1e-6


def test_featurize_identity_at_native_size():
    rng = np.random.default_rng(1)
    h = np.abs(rng.standard_normal((64, 64)))
    np.testing.assert_allclose(qnet.featurize_heatmap(h), normalize(h), atol=1e-7)


def test_featurize_downsample_delta_concentrates():
    h = np.zeros((128, 128))
    h[10, 20] = 3.0
    plane = qnet.featurize_heatmap(h)
    assert plane[5, 10] == pytest.approx(1.0, abs=1e-7)
    assert float(np.abs(plane).sum()) == pytest.approx(1.0, abs=1e-7)


def test_featurize_invariant_to_positive_scaling():
    rng = np.random.default_rng(2)
    h = np.abs(rng.standard_normal((48, 48)))
    np.testing.assert_array_equal(qnet.featurize_heatmap(h), qnet.featurize_heatmap(2.0 * h))


def test_resample_matrix_columns_sum_to_one():
    for n in (64, 72, 96, 128, 200):
        M = qnet._resample_matrix(n, 64)
        np.testing.assert_allclose(M.sum(axis=0), np.ones(n), atol=1e-12)


# ------------------------------------------------------------------ decision

def test_decision_decomposes_over_heads():
    rng = np.random.default_rng(0)
    for seed in range(20):
        q = qnet.QValues(motion=rng.standard_normal(2), appearance=rng.standard_normal(2))
        best = max(
            ((m, a) for m in range(2) for a in range(2)),
            key=lambda pair: q.motion[pair[0]] + q.appearance[pair[1]],
        )
        act = qnet.greedy_action(q)
        joint = q.motion[best[0]] + q.appearance[best[1]]
        chosen = (q.motion[0 if act.motion == MotionChoice.TRACK else 1]
                  + q.appearance[0 if act.appearance == AppearanceChoice.UPDATE else 1])
        assert chosen == joint


def test_greedy_tie_takes_first_action():
    q = qnet.QValues(motion=np.array([1.0, 1.0]), appearance=np.array([0.0, 0.0]))
    act = qnet.greedy_action(q)
    assert act.motion == MotionChoice.TRACK
    assert act.appearance == AppearanceChoice.UPDATE


# ---------------------------------------------------------------- checkpoint

def test_checkpoint_roundtrip_bit_exact(tmp_path):
    net = qnet.init_net(42)
    grads = {k: np.ones_like(v) for k, v in net.params.items()}
    qnet.sgd_step(net, grads, lr=1e-4, momentum=0.9, weight_decay=1e-8)
    path = tmp_path / "net.ptrk"
    qnet.save_checkpoint(net, path)
    loaded = qnet.load_checkpoint(path)
    for k in qnet.PARAM_ORDER:
        np.testing.assert_array_equal(loaded.params[k], net.params[k])
        np.testing.assert_array_equal(loaded.velocity[k], net.velocity[k])


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.ptrk"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(qnet.CheckpointError, match="magic"):
        qnet.load_checkpoint(path)


def test_checkpoint_bad_version(tmp_path):
    net = qnet.init_net(0)
    path = tmp_path / "v9.ptrk"
    qnet.save_checkpoint(net, path)
    blob = bytearray(path.read_bytes())
    blob[4:8] = (9).to_bytes(4, "little")
    path.write_bytes(bytes(blob))
    with pytest.raises(qnet.CheckpointError, match="version"):
        qnet.load_checkpoint(path)


def test_checkpoint_truncated(tmp_path):
    net = qnet.init_net(0)
    path = tmp_path / "trunc.ptrk"
    qnet.save_checkpoint(net, path)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(qnet.CheckpointError):
        qnet.load_checkpoint(path)


def test_checkpoint_trailing_garbage(tmp_path):
    net = qnet.init_net(0)
    path = tmp_path / "extra.ptrk"
    qnet.save_checkpoint(net, path)
    path.write_bytes(path.read_bytes() + b"\x00\x00\x00\x00")
    with pytest.raises(qnet.CheckpointError, match="trailing"):
        qnet.load_checkpoint(path)


def test_init_deterministic_and_in_glorot_range():
    a, b = qnet.init_net(7), qnet.init_net(7)
    for k in qnet.PARAM_ORDER:
        np.testing.assert_array_equal(a.params[k], b.params[k])
        assert np.all(a.velocity[k] == 0.0)
    lim1 = np.sqrt(6.0 / (256 + 1024))
    w1 = a.params["conv1_w"]
    assert np.all(np.abs(w1) <= lim1) and np.abs(w1).max() > 0.5 * lim1
    assert np.all(a.params["conv1_b"] == 0.0)
