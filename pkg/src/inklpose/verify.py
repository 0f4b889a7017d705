"""Finite-difference gradient suites at three scales.

``unit``       every differentiable primitive on small random inputs, 64-bit, rel. tol 1e-5
``toy``        the weighted training loss of a 32-point instance end to end, rel. tol 1e-4
``full-tiny``  all stages at default depth with tiny widths, plus every ablation arm, rel. tol 1e-4
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from inklpose import geometry, keypoint_net as kn, pose_head as ph, synthdata
from inklpose.config import TrainConfig
from inklpose.model import InklPoseNet, make_batch
from inklpose.substrate import functional as F
from inklpose.substrate.gradcheck import GradCheckReport, grad_check, require_margin
from inklpose.substrate.scan import scan_core, selective_scan
from inklpose.substrate.tensor import Tensor, no_grad, precision

UNIT_TOL = 1e-5
MODEL_TOL = 1e-4
# loss rounding is amplified by 1/h in a central difference; gradients below
# this many multiples of eps*|L|/(h*tol) are checked absolutely
NOISE_FLOOR_MULT = 10.0
SCALES = ("unit", "toy", "full-tiny")


@dataclass
class CaseResult:
    name: str
    report: GradCheckReport
    seconds: float

    @property
    def passed(self) -> bool:
        return self.report.passed


# -- unit cases -------------------------------------------------------------------

def _unit_cases(rng: np.random.Generator) -> list[tuple[str, Callable]]:
    """Each builder returns (scalar-valued closure, inputs)."""

    def T(*shape, lo=None, hi=None):
        if lo is not None:
            return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)
        return Tensor(rng.normal(size=shape), requires_grad=True)

    def weighted(fn, *inputs):
        # contract the output with fixed random weights so every entry matters
        probe = {}

        def f():
            out = fn()
            if "w" not in probe:
                probe["w"] = rng.normal(size=out.shape)
            return F.sum(out * probe["w"])

        return f, list(inputs)

    def elementwise(op, **kw):
        def build():
            a = T(3, 4, **kw)
            return weighted(lambda: op(a), a)
        return build

    def binary(op):
        def build():
            a, b = T(3, 4), T(4, lo=0.5, hi=2.0)
            return weighted(lambda: op(a, b), a, b)
        return build

    def b_max():
        a = T(3, 5, 4)
        require_margin(a.data, 1, 1e-5)
        return weighted(lambda: F.max(a, axis=1), a)

    def b_where():
        a, b = T(3, 4), T(3, 4)
        mask = rng.random((3, 4)) > 0.5
        return weighted(lambda: F.where(mask, a, b), a, b)

    def b_matmul():
        a, b = T(2, 3, 4), T(4, 5)
        return weighted(lambda: F.matmul(a, b), a, b)

    def b_linear():
        x, w, b = T(2, 3, 4), T(4, 5), T(5)
        return weighted(lambda: F.linear(x, w, b), x, w, b)

    def b_reduce():
        a = T(2, 3, 4)
        return weighted(lambda: F.sum(a + F.mean(a, axis=(0, 2), keepdims=True), axis=1), a)

    def b_shape():
        a = T(2, 3, 4)
        return weighted(lambda: F.flip(F.swapaxes(F.reshape(F.transpose(a, (2, 0, 1)), (4, 6)), 0, 1), 0), a)

    def b_broadcast_concat():
        a, b = T(1, 3), T(2, 2)
        return weighted(lambda: F.concat([F.broadcast_to(a, (2, 3)), b], axis=-1), a, b)

    def b_index():
        a = T(5, 4)
        rows = np.array([0, 3, 3, 1])
        return weighted(lambda: F.index(a, (slice(1, 4), slice(None))) * 2.0 + F.index(a, rows)[:3], a)

    def b_gather_repeat():
        a = T(2, 6, 3)
        idx = rng.integers(0, 6, size=(2, 4, 2))
        return weighted(lambda: F.repeat(F.gather_rows(a, idx), 2, axis=1), a)

    def b_softmax():
        a = T(3, 5)
        return weighted(lambda: F.softmax(a, axis=-1), a)

    def b_normalize():
        a = T(2, 3, 4)
        return weighted(lambda: F.normalize(a, (-2, -1), 1e-5, use_std=True) + F.normalize(a, -1, 1e-5), a)

    def b_layer_norm():
        x, g, b = T(2, 3, 4), T(4), T(4)
        return weighted(lambda: F.layer_norm(x, g, b), x, g, b)

    def b_attention():
        d = 4
        q, kv = T(2, 3, d), T(2, 5, d)
        params = {k: T(d, d) * 0.5 if k.startswith("w") else T(d) for k in
                  ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")}
        params = {k: Tensor(v.data, requires_grad=True) for k, v in params.items()}
        # the key bias shifts every score of a query equally, so its gradient is exactly zero
        checked = [v for k, v in params.items() if k != "bk"]
        return weighted(lambda: F.multi_head_attention(q, kv, kv, params, 2), q, kv, *checked)

    def b_smooth_l1():
        x = rng.uniform(0.1, 2.0, size=(3, 4)) * rng.choice([-1, 1], size=(3, 4))
        x[np.abs(np.abs(x) - 1.0) < 0.05] += 0.1
        a = Tensor(x, requires_grad=True)
        return weighted(lambda: F.smooth_l1(a), a)

    def b_norms():
        a = T(3, 4)
        return weighted(lambda: F.norm(a, axis=-1, eps=1e-3) + F.l2norm(a, axis=-1), a)

    def b_cross():
        a, b = T(4, 3), T(4, 3)
        return weighted(lambda: F.cross(a, b), a, b)

    def b_scan_core():
        L, d, n = 6, 3, 2
        u, B, C, D = T(2, L, d), T(2, L, n), T(2, L, n), T(d)
        delta = T(2, L, d, lo=0.1, hi=1.0)
        A = T(d, n, lo=-1.5, hi=-0.2)
        return weighted(lambda: scan_core(u, delta, A, B, C, D), u, delta, A, B, C, D)

    def b_selective_scan():
        d, n = 4, 2
        u = T(2, 5, d)
        params = {"A_log": T(d, n), "w_dt": T(d, d), "b_dt": T(d), "w_B": T(d, n), "b_B": T(n),
                  "w_C": T(d, n), "b_C": T(n), "D": T(d)}
        return weighted(lambda: selective_scan(u, params), u, *params.values())

    def b_chamfer():
        a, b = T(2, 7, 3), T(2, 5, 3)
        return weighted(lambda: geometry.chamfer(a, b) + geometry.one_sided_chamfer(a, b), a, b)

    def b_group_pool():
        d, K = 3, 3
        fused, coords, feats = T(2, 8, d), T(2, 4, 3), T(2, 4, d)
        alpha, beta = T(2 * d + 3), T(2 * d + 3)
        cloud = rng.normal(size=(2, 8, 3))
        nbr = np.stack([np.stack([rng.choice(8, K, replace=False) for _ in range(4)]) for _ in range(2)])
        return weighted(lambda: kn.group_pool(fused, cloud, coords, nbr, feats, alpha, beta),
                        fused, coords, feats, alpha, beta)

    def b_cosine_assign():
        q, f = T(2, 3, 4), T(2, 6, 4)
        return weighted(lambda: kn.cosine_assign(q, f, 2.0), q, f)

    def b_keypoint_losses():
        k = T(2, 6, 3)
        ref = rng.normal(size=(2, 5, 3))
        return weighted(lambda: kn.separation_loss(k, 2) + kn.diversity_loss(k) + kn.surface_loss(k, ref), k)

    def b_rotation_6d():
        r = T(3, 6)
        return weighted(lambda: ph.rotation_from_6d(r), r)

    def b_pose_terms():
        kc, nocs = T(2, 5, 3), T(2, 5, 3)
        R = np.stack([geometry.uniform_rotation(rng) for _ in range(2)])
        t, s = rng.normal(size=(2, 3)), rng.uniform(0.5, 1.0, size=(2, 3))
        Rp, tp, sp = T(2, 3, 3), T(2, 3), T(2, 3)
        est = ph.PoseEstimate(Rp, tp, sp, nocs)
        return weighted(lambda: ph.map_loss(nocs, ph.nocs_targets(kc, R, t, s)) + ph.pose_loss(est, R, t, s),
                        kc, nocs, Rp, tp, sp)

    return [
        ("add", binary(F.add)), ("sub", binary(F.sub)), ("mul", binary(F.mul)), ("div", binary(F.div)),
        ("power", elementwise(lambda a: F.power(a, 2.5), lo=0.5, hi=2.0)),
        ("exp", elementwise(F.exp)), ("log", elementwise(F.log, lo=0.5, hi=2.0)),
        ("sqrt", elementwise(F.sqrt, lo=0.5, hi=2.0)), ("abs", elementwise(F.abs, lo=0.2, hi=2.0)),
        ("gelu", elementwise(F.gelu)), ("softplus", elementwise(F.softplus)),
        ("where", b_where), ("matmul", b_matmul), ("linear", b_linear), ("sum_mean", b_reduce),
        ("max", b_max), ("reshape_transpose_swap_flip", b_shape), ("broadcast_concat", b_broadcast_concat),
        ("index", b_index), ("gather_repeat", b_gather_repeat), ("softmax", b_softmax),
        ("normalize", b_normalize), ("layer_norm", b_layer_norm), ("attention", b_attention),
        ("smooth_l1", b_smooth_l1), ("norm", b_norms), ("cross", b_cross),
        ("scan_core", b_scan_core), ("selective_scan", b_selective_scan), ("chamfer", b_chamfer),
        ("group_pool", b_group_pool), ("cosine_assign", b_cosine_assign),
        ("keypoint_losses", b_keypoint_losses), ("rotation_6d", b_rotation_6d), ("pose_terms", b_pose_terms),
    ]


def unit_names() -> list[str]:
    return [name for name, _ in _unit_cases(np.random.default_rng(0))]


# -- model cases ----------------------------------------------------------------

def toy_config(**overrides) -> TrainConfig:
    """A 32-point, 64-bit model small enough to finite-difference every parameter tensor."""
    base = dict(precision=64, n_points=32, n_kpt=8, d=16, d1=8, d2=8, d3=8, K=4, S=2, n_rec=16, n_fps=8,
                M=2, heads=2, iakd_rounds=1, d_state=4, geo_knn=8, temperature=10.0)
    base.update(overrides)
    return TrainConfig(**base).validate()


def toy_sample(n_points: int = 32, seed: int = 0, cat: str = "mug"):
    """One generated instance, subsampled to ``n_points`` by FPS and rescaled to a unit box diagonal.

    Unit size keeps the separation term (an inverse distance) moderate, so
    central differences are not swamped by rounding of a large loss value.
    """
    rng = synthdata.instance_rng(seed, 0)
    s = synthdata.generate_instance(synthdata.category(cat), rng, instance_id=seed, occlude=False)
    idx = geometry.farthest_point_sampling(s.cloud.points, n_points, seed=0)
    cloud = geometry.PointCloud(s.cloud.points[idx].astype(np.float64), s.cloud.appearance[idx].astype(np.float64))
    small = synthdata.InstanceSample(cloud, s.gt, s.category, s.canonical[idx], s.instance_id)
    return synthdata.apply_similarity(small, np.eye(3), np.zeros(3), 1.0 / s.gt.scale)


def model_case(cfg: TrainConfig, samples, max_entries: int = 4, h: float = 1e-4, atol: float | None = 0.0,
               include_largest: bool = False, tamper: bool = False, seed: int = 0):
    net = InklPoseNet(cfg, seed=seed)
    # zero-initialised queries sit at the layer-norm variance floor, where the
    # loss is too curved for central differences; check at a generic point
    q = net.reg["iakd.q_embed"]
    q.data = np.random.default_rng(seed).normal(0.0, 0.5, size=q.shape)
    batch = make_batch(samples, cfg)

    def f():
        return net.loss(net.forward(batch))[0]

    if atol is None:
        with no_grad():
            loss0 = abs(float(f().data))
        atol = NOISE_FLOOR_MULT * np.finfo(np.float64).eps * loss0 / (h * MODEL_TOL)
    # attention key biases get an exactly zero gradient (softmax shift invariance)
    inputs = {k: v for k, v in net.reg.items() if not k.endswith(".bk")}
    return grad_check(f, inputs, h=h, tol=MODEL_TOL, max_entries=max_entries, seed=seed, atol=atol,
                      include_largest=include_largest, _tamper=tamper)


# -- runners -------------------------------------------------------------------

def run_unit(seed: int = 0, tamper: bool = False, names=None) -> list[CaseResult]:
    rng = np.random.default_rng(seed)
    out = []
    with precision(np.float64):
        for i, (name, build) in enumerate(_unit_cases(rng)):
            if names is not None and name not in names:
                continue
            t0 = time.perf_counter()
            f, inputs = build()
            rep = grad_check(f, inputs, h=1e-5, tol=UNIT_TOL, _tamper=tamper and not out)
            out.append(CaseResult(name, rep, time.perf_counter() - t0))
    return out


def run_toy(seed: int = 0, tamper: bool = False) -> list[CaseResult]:
    cfg = toy_config()
    t0 = time.perf_counter()
    # the loss is in the thousands (separation term), so tensors with small
    # gradients sit near the finite-difference noise floor; h = 3e-5 keeps
    # perturbations clear of nearest-neighbour pairing switches in the chamfer terms
    rep = model_case(cfg, [toy_sample(cfg.n_points, seed)], h=3e-5, atol=None, include_largest=True,
                     tamper=tamper, seed=seed)
    return [CaseResult("toy_end_to_end", rep, time.perf_counter() - t0)]


FULL_TINY_ARMS = {
    "bi_scan_fsf": {},
    "uni_scan": {"uni_mamba": True},
    "attention": {"attention_gkfa": True},
    "psf": {"psf_instead_of_fsf": True},
    "agpose_losses": {"use_agpose_losses": True},
}


def run_full_tiny(seed: int = 0, tamper: bool = False) -> list[CaseResult]:
    out = []
    samples = [toy_sample(48, seed, "mug"), toy_sample(48, seed + 1, "laptop")]
    for name, flags in FULL_TINY_ARMS.items():
        cfg = toy_config(n_points=48, S=12, n_kpt=6, n_rec=12, d=8, d1=4, d2=4, d3=4, **flags)
        t0 = time.perf_counter()
        # deep stacks leave many entries with gradients near the rounding floor
        # of the loss; anchor each tensor's scale on its largest entry and use a
        # step small enough to stay clear of max-pool and nearest-neighbour switches
        rep = model_case(cfg, samples, max_entries=2, h=1e-5, atol=None, include_largest=True,
                         tamper=tamper and not out, seed=seed)
        out.append(CaseResult(f"full_tiny_{name}", rep, time.perf_counter() - t0))
    return out


def run_scale(scale: str, seed: int = 0, tamper: bool = False) -> list[CaseResult]:
    if scale == "unit":
        return run_unit(seed, tamper)
    if scale == "toy":
        return run_toy(seed, tamper)
    if scale == "full-tiny":
        return run_full_tiny(seed, tamper)
    raise ValueError(f"unknown scale {scale!r}; expected one of {', '.join(SCALES)}")
