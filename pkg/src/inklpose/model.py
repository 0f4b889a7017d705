"""End-to-end network: batching, forward pass and loss terms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from inklpose import geometry, keypoint_net as kn, pose_head as ph
from inklpose.config import TrainConfig
from inklpose.substrate import functional as F
from inklpose.substrate.params import ParamRegistry
from inklpose.substrate.tensor import Tensor, precision


@dataclass
class Batch:
    points: np.ndarray       # [B, N, 3]
    appearance: np.ndarray   # [B, N, 6]
    nbr: np.ndarray          # [B, N, k] encoder neighbourhoods
    fps_idx: np.ndarray      # [B, N_fps] surface-loss reference indices
    R: np.ndarray            # [B, 3, 3]
    t: np.ndarray            # [B, 3]
    s: np.ndarray            # [B, 3]
    categories: list
    instance_ids: list

    def __len__(self) -> int:
        return len(self.points)


def reference_start(points: np.ndarray) -> int:
    """Index of the point farthest from the centroid.

    Depends only on the point set (not its order) and is unchanged by
    similarity transforms, so the FPS reference is permutation safe and
    stable under augmentation.
    """
    p = np.asarray(points, dtype=np.float64)
    d = np.sum((p - p.mean(axis=0)) ** 2, axis=1)
    best = d.max()
    # among numerically tied candidates take the lexicographically smallest point
    cand = np.nonzero(d >= best * (1 - 1e-12))[0]
    if len(cand) > 1:
        order = np.lexsort(p[cand].T[::-1])
        return int(cand[order[0]])
    return int(cand[0])


def reference_indices(points: np.ndarray, n_fps: int) -> np.ndarray:
    return geometry.farthest_point_sampling(points, min(n_fps, len(points)), seed=reference_start(points))


class InstanceCache:
    """Per-instance neighbourhoods and FPS references (both similarity invariant)."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self._store: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def get(self, sample) -> tuple[np.ndarray, np.ndarray]:
        key = sample.instance_id
        if key not in self._store:
            pts = sample.cloud.points.astype(np.float64)
            nbr = geometry.knn(pts, pts, min(self.cfg.geo_knn, len(pts)))
            self._store[key] = (nbr, reference_indices(pts, self.cfg.n_fps))
        return self._store[key]


def make_batch(samples, cfg: TrainConfig, cache: InstanceCache | None = None) -> Batch:
    cache = cache or InstanceCache(cfg)
    nbrs, fps = zip(*(cache.get(s) for s in samples))
    return Batch(
        points=np.stack([s.cloud.points for s in samples]).astype(np.float64),
        appearance=np.stack([s.cloud.appearance for s in samples]).astype(np.float64),
        nbr=np.stack(nbrs),
        fps_idx=np.stack(fps),
        R=np.stack([s.gt.R for s in samples]).astype(np.float64),
        t=np.stack([s.gt.t for s in samples]).astype(np.float64),
        s=np.stack([s.gt.s for s in samples]).astype(np.float64),
        categories=[s.category for s in samples],
        instance_ids=[s.instance_id for s in samples],
    )


@dataclass
class ForwardResult:
    terms: dict              # name -> Tensor of per-instance values [B]
    pose: ph.PoseEstimate
    kpts: kn.KeypointSet
    kpt_cam: Tensor          # [B, N_kpt, 3] camera frame
    nocs_gt: Tensor          # [B, N_kpt, 3]
    centroid: np.ndarray


class InklPoseNet:
    def __init__(self, cfg: TrainConfig, seed: int | None = None):
        self.cfg = cfg.validate()
        self.dtype = np.dtype(cfg.dtype)
        self.reg = ParamRegistry(cfg.seed if seed is None else seed, self.dtype)
        kn.register_params(self.reg, cfg)
        ph.register_params(self.reg, cfg)

    def forward(self, batch: Batch, stages: int | None = None) -> ForwardResult:
        cfg, reg = self.cfg, self.reg
        with precision(self.dtype):
            enc = kn.encode(reg, cfg, batch.points, batch.appearance, batch.nbr)
            kpts = kn.detect_keypoints(reg, cfg, enc)
            feats, l_sim = kn.stack_forward(reg, cfg, enc, kpts, stages)
            nocs = ph.predict_nocs(reg, cfg, feats)
            pose = ph.regress_pose(reg, cfg, kpts.coords, nocs, feats, enc.centroid)
            kpt_cam = kpts.camera_coords(enc.centroid)
            nocs_gt = ph.nocs_targets(kpt_cam, batch.R, batch.t, batch.s)
            terms = {}
            if cfg.use_agpose_losses:
                if not cfg.disable_Lsep:
                    terms["L_sep"] = kn.diversity_loss(kpts.coords)
                if not cfg.disable_Lsurf:
                    terms["L_surf"] = kn.coverage_loss(kpts.coords, Tensor(enc.centered.astype(self.dtype)))
            else:
                if not cfg.disable_Lsep:
                    terms["L_sep"] = kn.separation_loss(kpts.coords, cfg.M)
                if not cfg.disable_Lsurf:
                    ref = np.take_along_axis(enc.centered, batch.fps_idx[..., None], axis=1)
                    terms["L_surf"] = kn.surface_loss(kpts.coords, Tensor(ref.astype(self.dtype)))
            terms["L_sim"] = l_sim
            terms["L_map"] = ph.map_loss(nocs, nocs_gt)
            terms["L_pose"] = ph.pose_loss(pose, batch.R, batch.t, batch.s)
        return ForwardResult(terms, pose, kpts, kpt_cam, nocs_gt, enc.centroid)

    def loss(self, result: ForwardResult) -> tuple[Tensor, dict[str, float]]:
        """Batch-mean of each term and their weighted sum."""
        means = {k: F.mean(v) for k, v in result.terms.items()}
        total = ph.total_loss(means, ph.loss_weights(self.cfg))
        logged = {k: float(v.data) for k, v in means.items()}
        for k in ph.LOSS_NAMES:
            logged.setdefault(k, 0.0)
        logged["total"] = float(total.data)
        return total, logged
