"""NOCS keypoint prediction, direct pose/size regression and the training objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from inklpose.config import TrainConfig
from inklpose.errors import NumericError
from inklpose.substrate import functional as F
from inklpose.substrate.params import ParamRegistry, apply_layer_norm, apply_mlp, attention_params
from inklpose.substrate.tensor import Tensor

ROT_EPS = 1e-8


@dataclass
class PoseEstimate:
    R: Tensor          # [B, 3, 3]
    t: Tensor          # [B, 3]
    s: Tensor          # [B, 3]
    nocs_kpts: Tensor  # [B, N_kpt, 3]


def register_params(reg: ParamRegistry, cfg: TrainConfig) -> None:
    d = cfg.d
    reg.layer_norm("head.nocs_ln", d)
    reg.attention("head.nocs_attn", d)
    reg.mlp("head.nocs_mlp", [d, d // 2, 3])
    reg.mlp("head.point", [d + 6, d, d])
    reg.mlp("head.rot", [2 * d, d, 6])
    reg.mlp("head.trans", [2 * d, d, 3])
    reg.mlp("head.size", [2 * d, d, 3])


def predict_nocs(reg: ParamRegistry, cfg: TrainConfig, feats: Tensor) -> Tensor:
    """One self-attention layer over keypoint features, then a per-keypoint MLP to 3D."""
    h = apply_layer_norm(reg, "head.nocs_ln", feats)
    h = feats + F.multi_head_attention(h, h, h, attention_params(reg, "head.nocs_attn"), cfg.heads)
    return apply_mlp(reg, "head.nocs_mlp", h)


def rotation_from_6d(r: Tensor, eps: float = ROT_EPS) -> Tensor:
    """Gram-Schmidt on two 3-vectors; the columns of the result are (b1, b2, b1 x b2).

    A first vector with norm below ``eps`` falls back to the x-axis; a second
    vector (almost) parallel to the first falls back to a fixed perpendicular
    direction.  The fallback branches carry no gradient.
    """
    lead = r.shape[:-1]
    a1 = r[..., 0:3]
    a2 = r[..., 3:6]
    n1 = F.l2norm(a1, axis=-1)
    ok1 = n1.data > eps
    b1 = a1 / F.reshape(F.where(ok1, n1, 1.0), lead + (1,))
    e1 = np.zeros(lead + (3,), dtype=r.dtype)
    e1[..., 0] = 1.0
    b1 = F.where(np.broadcast_to(ok1[..., None], lead + (3,)), b1, e1)

    proj = F.sum(b1 * a2, axis=-1, keepdims=True)
    u2 = a2 - proj * b1
    n2 = F.l2norm(u2, axis=-1)
    ok2 = n2.data > eps
    b2 = u2 / F.reshape(F.where(ok2, n2, 1.0), lead + (1,))
    if not ok2.all():
        b2 = F.where(np.broadcast_to(ok2[..., None], lead + (3,)), b2, _perpendicular(b1.data))
    b3 = F.cross(b1, b2)
    cols = [F.reshape(b, lead + (3, 1)) for b in (b1, b2, b3)]
    return F.concat(cols, axis=-1)


def _perpendicular(v: np.ndarray) -> np.ndarray:
    """A unit vector orthogonal to each unit row of ``v``: the least aligned axis, orthogonalised.

    For ``v`` = x-axis this is the y-axis, so an all-zero 6D input maps to the identity.
    """
    axis = np.zeros_like(v)
    idx = np.argmin(np.abs(v), axis=-1)
    np.put_along_axis(axis, idx[..., None], 1.0, axis=-1)
    w = axis - np.sum(axis * v, axis=-1, keepdims=True) * v
    return w / np.linalg.norm(w, axis=-1, keepdims=True)


def regress_pose(reg: ParamRegistry, cfg: TrainConfig, coords: Tensor, nocs: Tensor, feats: Tensor,
                 centroid: np.ndarray) -> PoseEstimate:
    """Pose and size from keypoints: per-keypoint MLP, mean+max pooling, three heads.

    ``coords`` are centred keypoint coordinates; the translation head predicts
    an offset from ``centroid``.
    """
    x = F.concat([coords, nocs, feats], axis=-1)
    h = apply_mlp(reg, "head.point", x, final_act=True)
    pooled = F.concat([F.mean(h, axis=-2), F.max(h, axis=-2)], axis=-1)
    R = rotation_from_6d(apply_mlp(reg, "head.rot", pooled))
    t = apply_mlp(reg, "head.trans", pooled) + centroid.astype(reg.dtype)
    s = F.softplus(apply_mlp(reg, "head.size", pooled))
    return PoseEstimate(R=R, t=t, s=s, nocs_kpts=nocs)


def nocs_targets(kpt_cam: Tensor, R: np.ndarray, t: np.ndarray, s: np.ndarray) -> Tensor:
    """Ground-truth canonical keypoints ``(x - t) R / ||s||`` (row-vector convention)."""
    dt = kpt_cam.dtype
    scale = np.linalg.norm(np.asarray(s, dtype=np.float64), axis=-1)
    shifted = kpt_cam - np.asarray(t, dtype=dt)[:, None, :]
    return F.matmul(shifted, np.asarray(R, dtype=dt)) * (1.0 / scale)[:, None, None].astype(dt)


def map_loss(pred: Tensor, gt: Tensor) -> Tensor:
    """Per-keypoint smooth-L1 summed over xyz, averaged over keypoints; [B] (or scalar)."""
    per = F.sum(F.smooth_l1(pred - gt), axis=-1)
    return F.mean(per, axis=-1)


def pose_loss(pred: PoseEstimate, R_gt, t_gt, s_gt) -> Tensor:
    """Frobenius rotation error + Euclidean translation and size errors; [B]."""
    dt = pred.R.dtype
    dR = pred.R - np.asarray(R_gt, dtype=dt)
    lead = dR.shape[:-2]
    r_term = F.l2norm(F.reshape(dR, lead + (9,)), axis=-1)
    t_term = F.l2norm(pred.t - np.asarray(t_gt, dtype=dt), axis=-1)
    s_term = F.l2norm(pred.s - np.asarray(s_gt, dtype=dt), axis=-1)
    return r_term + t_term + s_term


LOSS_NAMES = ("L_sep", "L_surf", "L_sim", "L_map", "L_pose")


def loss_weights(cfg: TrainConfig) -> dict[str, float]:
    return {"L_sep": cfg.w_sep, "L_surf": cfg.w_surf, "L_sim": cfg.w_sim, "L_map": cfg.w_map, "L_pose": cfg.w_pose}


def total_loss(terms: dict, weights: dict) -> Tensor:
    """Weighted sum of scalar loss terms; non-finite components raise with their name."""
    out = None
    for name, value in terms.items():
        w = weights.get(name, 0.0)
        val = value.data if isinstance(value, Tensor) else np.asarray(value)
        if not np.all(np.isfinite(val)):
            raise NumericError(f"loss component {name} is not finite ({float(np.sum(val))})")
        if w == 0.0:
            continue
        term = value * w if isinstance(value, Tensor) else Tensor(np.asarray(val * w, dtype=np.float64))
        out = term if out is None else out + term
    if out is None:
        return Tensor(np.zeros(()))
    return out
