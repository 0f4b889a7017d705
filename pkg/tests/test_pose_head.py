import numpy as np
import pytest
from hypothesis import given, strategies as st

from inklpose import pose_head as ph, verify
from inklpose.config import TrainConfig
from inklpose.errors import NumericError
from inklpose.geometry import PointCloud, SimTransform, rot_y
from inklpose.model import InklPoseNet, make_batch
from inklpose.substrate.params import ParamRegistry
from inklpose.substrate.tensor import Tensor, no_grad, precision
from inklpose.synthdata import InstanceSample


def rot6d(v):
    with precision(np.float64):
        return ph.rotation_from_6d(Tensor(np.asarray(v, dtype=np.float64))).data


def is_rotation(R, tol=1e-5):
    return np.allclose(R @ R.swapaxes(-1, -2), np.eye(3), atol=tol) and np.allclose(np.linalg.det(R), 1.0, atol=tol)


def test_rotation_from_6d_identity():
    assert np.allclose(rot6d([1, 0, 0, 0, 1, 0]), np.eye(3), atol=1e-15)


@given(v=st.lists(st.floats(-1e3, 1e3), min_size=6, max_size=6))
def test_rotation_from_6d_always_valid(v):
    assert is_rotation(rot6d(v))


@pytest.mark.parametrize("v", [[0, 0, 0, 0, 1, 0], [0, 0, 0, 0, 0, 0], [1, 2, 3, 2, 4, 6],
                               [1e-9, 0, 0, 0, 0, 1], [0, 0, 5, 0, 0, 0]])
def test_rotation_from_6d_degenerate_fallbacks(v):
    R = rot6d(v)
    assert is_rotation(R)
    if not any(v[:3]):
        assert np.array_equal(R[:, 0], [1, 0, 0])
    if v == [0, 0, 0, 0, 0, 0]:
        assert np.allclose(R, np.eye(3))


def test_rotation_from_6d_batched_and_gradient():
    from inklpose.substrate.gradcheck import grad_check
    from inklpose.substrate import functional as F
    rng = np.random.default_rng(0)
    with precision(np.float64):
        x = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
        w = rng.normal(size=(4, 3, 3))
        assert is_rotation(ph.rotation_from_6d(x).data)
        rep = grad_check(lambda: F.sum(ph.rotation_from_6d(x) * w), x, h=1e-6, tol=1e-5)
    assert rep.passed


def test_map_loss_examples():
    with precision(np.float64):
        z = Tensor(np.zeros((1, 3)))
        assert float(ph.map_loss(z, np.zeros((1, 3))).data) == 0.0
        assert float(ph.map_loss(Tensor([[0.5, 0, 0]]), np.zeros((1, 3))).data) == 0.125
        assert float(ph.map_loss(Tensor([[2.0, 0, 0]]), np.zeros((1, 3))).data) == 1.5
        # averaged over keypoints, summed over xyz
        two = ph.map_loss(Tensor([[0.5, 0, 0], [2.0, 2.0, 0]]), np.zeros((2, 3)))
        assert float(two.data) == pytest.approx((0.125 + 3.0) / 2)


def _pose(R, t, s):
    a = lambda x: Tensor(np.asarray(x, dtype=np.float64)[None])
    return ph.PoseEstimate(R=a(R), t=a(t), s=a(s), nocs_kpts=None)


def test_pose_loss_examples():
    I, t, s = np.eye(3), np.array([0.1, 0.2, 0.3]), np.array([1.0, 2.0, 3.0])
    Rz = np.diag([-1.0, -1.0, 1.0])
    with precision(np.float64):
        assert float(ph.pose_loss(_pose(I, t, s), I[None], t[None], s[None]).data[0]) == 0.0
        off = ph.pose_loss(_pose(I, t + [0.01, 0, 0], s), I[None], t[None], s[None]).data[0]
        assert off == pytest.approx(0.01, abs=1e-15)
        flip = ph.pose_loss(_pose(Rz, t, s), I[None], t[None], s[None]).data[0]
        assert flip == pytest.approx(np.sqrt(8.0), abs=1e-15)


@given(seed=st.integers(0, 2**31 - 1))
def test_pose_loss_nonnegative_zero_iff_equal(seed):
    rng = np.random.default_rng(seed)
    R = rot6d(rng.normal(size=6))
    t, s = rng.normal(size=3), rng.uniform(0.1, 1, 3)
    with precision(np.float64):
        assert float(ph.pose_loss(_pose(R, t, s), R[None], t[None], s[None]).data[0]) == 0.0
        t2 = t + rng.normal(size=3) * 1e-3
        assert float(ph.pose_loss(_pose(R, t2, s), R[None], t[None], s[None]).data[0]) > 0.0


def test_total_loss_weighting():
    w = ph.loss_weights(TrainConfig())
    with precision(np.float64):
        ones = {k: Tensor(np.float64(1.0)) for k in ph.LOSS_NAMES}
        zeros = {k: Tensor(np.float64(0.0)) for k in ph.LOSS_NAMES}
        assert float(ph.total_loss(ones, w).data) == pytest.approx(37.3, abs=1e-12)
        assert float(ph.total_loss(zeros, w).data) == 0.0
        w1 = dict(w, L_sep=1.0)
        assert float(ph.total_loss(ones, w1).data) == pytest.approx(37.3 - 9.0, abs=1e-12)


@pytest.mark.parametrize("bad", [np.nan, np.inf])
def test_total_loss_non_finite_names_component(bad):
    terms = {k: Tensor(np.float64(1.0)) for k in ph.LOSS_NAMES}
    terms["L_map"] = Tensor(np.float64(bad))
    with pytest.raises(NumericError, match="L_map"):
        ph.total_loss(terms, ph.loss_weights(TrainConfig()))


def test_nocs_targets_match_transform():
    rng = np.random.default_rng(2)
    gt = SimTransform(rot_y(0.7), np.array([0.1, -0.2, 0.5]), np.array([0.2, 0.1, 0.3]))
    canon = rng.uniform(-0.3, 0.3, size=(10, 3))
    cam = gt.from_nocs(canon)
    with precision(np.float64):
        out = ph.nocs_targets(Tensor(cam[None]), gt.R[None], gt.t[None], gt.s[None]).data[0]
    assert np.allclose(out, canon, atol=1e-12)


def test_predict_nocs_shape_and_permutation():
    cfg = TrainConfig()
    reg = ParamRegistry(0, np.float32)
    ph.register_params(reg, cfg)
    feats = np.random.default_rng(0).normal(size=(1, 96, cfg.d)).astype(np.float32)
    perm = np.random.default_rng(1).permutation(96)
    with no_grad():
        a = ph.predict_nocs(reg, cfg, Tensor(feats)).data
        b = ph.predict_nocs(reg, cfg, Tensor(feats[:, perm])).data
        c = ph.predict_nocs(reg, cfg, Tensor(feats)).data
    assert a.shape == (1, 96, 3)
    assert np.array_equal(a, c)
    assert np.allclose(a[:, perm], b, atol=1e-5)


def test_translation_follows_cloud_shift():
    cfg = verify.toy_config()
    net = InklPoseNet(cfg, seed=2)
    # the absolute-position encoder is the only path that sees uncentred coordinates
    net.reg.zero_("enc.pos")
    s = verify.toy_sample(cfg.n_points, 1)
    shift = np.array([0.25, -0.4, 1.5])
    moved = InstanceSample(PointCloud(s.cloud.points + shift, s.cloud.appearance),
                           SimTransform(s.gt.R, s.gt.t + shift, s.gt.s), s.category, s.canonical,
                           s.instance_id + 1)
    with no_grad():
        a = net.forward(make_batch([s], cfg))
        b = net.forward(make_batch([moved], cfg))
    assert np.allclose(b.pose.t.data - a.pose.t.data, shift, atol=1e-9)
    assert np.allclose(b.pose.R.data, a.pose.R.data, atol=1e-9)
    assert np.allclose(b.pose.s.data, a.pose.s.data, atol=1e-9)
