"""Pointwise encoder, keypoint detector and stacked local/global keypoint aggregation.

Every function works on a leading batch axis.  Point coordinates handed to
the learned layers are centred on the per-instance mean; raw camera-frame
coordinates only feed the positional embedding of the encoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from inklpose import geometry
from inklpose.config import TrainConfig
from inklpose.errors import ArgumentError, ShapeError
from inklpose.substrate import functional as F
from inklpose.substrate.params import (
    ParamRegistry,
    apply_layer_norm,
    apply_mlp,
    attention_params,
    ssm_params,
)
from inklpose.substrate.scan import selective_scan
from inklpose.substrate.tensor import Tensor, add_flops, make_result

try:  # pragma: no cover - exercised implicitly
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    _HAVE_NUMBA = False

COS_EPS = 1e-8
GROUP_EPS = 1e-5
SEP_EPS = 1e-6


@dataclass
class EncoderOutput:
    fused: Tensor          # [B, N, d]
    pos_embed: Tensor      # [B, N, d3]
    geo: Tensor            # [B, N, d2], pre-fusion geometric features
    centroid: np.ndarray   # [B, 3]
    centered: np.ndarray   # [B, N, 3]


@dataclass
class KeypointSet:
    coords: Tensor         # [B, N_kpt, 3], centred frame
    feats: Tensor          # [B, N_kpt, d]
    assign: Tensor         # [B, N_kpt, N]

    def camera_coords(self, centroid: np.ndarray) -> Tensor:
        return self.coords + centroid[:, None, :].astype(self.coords.dtype)


# -- parameters ---------------------------------------------------------------

def register_params(reg: ParamRegistry, cfg: TrainConfig) -> None:
    d = cfg.d
    reg.mlp("enc.sem", [6, cfg.d1, cfg.d1])
    reg.mlp("enc.geo", [6, cfg.d2, cfg.d2])
    reg.mlp("enc.pos", [3, cfg.d3, cfg.d3])
    reg.mlp("enc.fuse", [cfg.d1 + cfg.d2 + cfg.d3, d, d])
    # learnable query content starts at zero; the positional part breaks symmetry
    reg.constant("iakd.q_embed", (cfg.n_kpt, d), 0.0)
    reg.normal("iakd.q_pos", (cfg.n_kpt, d), 1.0)
    reg.layer_norm("iakd.mem_ln", d)
    for r in range(cfg.iakd_rounds):
        p = f"iakd.round{r}"
        reg.layer_norm(f"{p}.ln_self", d)
        reg.attention(f"{p}.self", d)
        reg.layer_norm(f"{p}.ln_cross", d)
        reg.attention(f"{p}.cross", d)
        reg.layer_norm(f"{p}.ln_ffn", d)
        reg.mlp(f"{p}.ffn", [d, 2 * d, d])
    reg.layer_norm("iakd.out_ln", d)
    for s in range(cfg.S):
        register_stage(reg, cfg, s)


def register_stage(reg: ParamRegistry, cfg: TrainConfig, s: int) -> None:
    d = cfg.d
    p = f"stage{s}"
    reg.mlp(f"{p}.lkfa.pos", [3, d, d])
    reg.constant(f"{p}.lkfa.alpha", (2 * d + 3,), 1.0)
    reg.constant(f"{p}.lkfa.beta", (2 * d + 3,), 0.0)
    reg.mlp(f"{p}.lkfa.out", [2 * d + 3, d, d])
    reg.layer_norm(f"{p}.gkfa.ln", d)
    if cfg.attention_gkfa:
        reg.attention(f"{p}.gkfa.attn", d)
    else:
        reg.ssm(f"{p}.gkfa.scan_a", d, cfg.d_state)
        if not cfg.uni_mamba:
            reg.ssm(f"{p}.gkfa.scan_b", d, cfg.d_state)
    reg.mlp(f"{p}.rec", [d, d // 2, 3 * cfg.m])


# -- encoder ------------------------------------------------------------------

def encoder_neighbors(points: np.ndarray, k: int) -> np.ndarray:
    """k-NN indices (self included) used by the geometric encoder; [B, N, k]."""
    pts = np.asarray(points)
    if pts.ndim == 2:
        pts = pts[None]
    return geometry.batched_knn(pts, pts, k)


def encode(reg: ParamRegistry, cfg: TrainConfig, points: np.ndarray, appearance: np.ndarray,
           nbr: np.ndarray | None = None) -> EncoderOutput:
    """Fuse appearance, centred geometry and absolute position into per-point features."""
    if appearance is None:
        raise ArgumentError("encoder needs per-point appearance channels")
    dt = reg.dtype
    pts = np.asarray(points, dtype=np.float64)
    app = np.asarray(appearance)
    if pts.ndim == 2:
        pts, app = pts[None], app[None]
        if nbr is not None and nbr.ndim == 2:
            nbr = nbr[None]
    if pts.shape[:2] != app.shape[:2] or pts.shape[-1] != 3 or app.shape[-1] != 6:
        raise ShapeError(f"points {pts.shape} and appearance {app.shape} do not match")
    if nbr is None:
        nbr = encoder_neighbors(pts, min(cfg.geo_knn, pts.shape[1]))
    centroid = pts.mean(axis=1)
    centered = pts - centroid[:, None, :]
    local_mean = centered[np.arange(len(pts))[:, None, None], nbr].mean(axis=2)
    geo_in = Tensor(np.concatenate([centered, local_mean], axis=-1).astype(dt))
    sem = apply_mlp(reg, "enc.sem", Tensor(app.astype(dt)), final_act=True)
    geo = apply_mlp(reg, "enc.geo", geo_in, final_act=True)
    pos = apply_mlp(reg, "enc.pos", Tensor(pts.astype(dt)), final_act=True)
    fused = apply_mlp(reg, "enc.fuse", F.concat([sem, geo, pos], axis=-1))
    return EncoderOutput(fused=fused, pos_embed=pos, geo=geo, centroid=centroid, centered=centered)


# -- keypoint detector --------------------------------------------------------

def refine_queries(reg: ParamRegistry, cfg: TrainConfig, fused: Tensor) -> Tensor:
    """Zero-initialised query bank refined by self-/cross-attention rounds; [B, N_kpt, d]."""
    bsz = fused.shape[0]
    q = F.broadcast_to(reg["iakd.q_embed"], (bsz,) + reg["iakd.q_embed"].shape)
    qpos = reg["iakd.q_pos"]
    mem = apply_layer_norm(reg, "iakd.mem_ln", fused)
    for r in range(cfg.iakd_rounds):
        p = f"iakd.round{r}"
        h = apply_layer_norm(reg, f"{p}.ln_self", q) + qpos
        q = q + F.multi_head_attention(h, h, h, attention_params(reg, f"{p}.self"), cfg.heads)
        h = apply_layer_norm(reg, f"{p}.ln_cross", q) + qpos
        q = q + F.multi_head_attention(h, mem, mem, attention_params(reg, f"{p}.cross"), cfg.heads)
        q = q + apply_mlp(reg, f"{p}.ffn", apply_layer_norm(reg, f"{p}.ln_ffn", q))
    return apply_layer_norm(reg, "iakd.out_ln", q)


def cosine_assign(q: Tensor, feats: Tensor, temperature: float = 1.0) -> Tensor:
    """Row-softmax over points of cosine similarity between queries and point features."""
    num = F.matmul(q, F.swapaxes(feats, -1, -2))
    nq = F.l2norm(q, axis=-1)
    nf = F.l2norm(feats, axis=-1)
    den = F.reshape(nq, nq.shape + (1,)) * F.reshape(nf, nf.shape[:-1] + (1, nf.shape[-1])) + COS_EPS
    sim = num / den
    if temperature != 1.0:
        sim = sim * temperature
    return F.softmax(sim, axis=-1)


def detect_keypoints(reg: ParamRegistry, cfg: TrainConfig, enc: EncoderOutput) -> KeypointSet:
    q = refine_queries(reg, cfg, enc.fused)
    W = cosine_assign(q, enc.fused, cfg.temperature)
    coords = F.matmul(W, Tensor(enc.centered.astype(reg.dtype)))
    feats = F.matmul(W, enc.fused)
    return KeypointSet(coords=coords, feats=feats, assign=W)


# -- keypoint losses ------------------------------------------------------------

def surface_loss(kpts: Tensor, ref) -> Tensor:
    """Chamfer distance between FPS reference points and keypoints; one value per batch entry."""
    return geometry.chamfer(ref, kpts)


def separation_loss(kpts: Tensor, M: int = 2, eps: float = SEP_EPS) -> Tensor:
    """Reciprocal of the mean distance from each keypoint to its ``M`` nearest other keypoints."""
    squeeze = kpts.ndim == 2
    if squeeze:
        kpts = F.reshape(kpts, (1,) + kpts.shape)
    bsz, n, _ = kpts.shape
    if n <= M:
        raise ArgumentError(f"separation loss needs more than M={M} keypoints, got {n}")
    x = kpts.data.astype(np.float64)
    d2 = np.sum((x[:, :, None, :] - x[:, None, :, :]) ** 2, axis=-1)
    d2[:, np.arange(n), np.arange(n)] = np.inf
    nn = np.stack([_smallest_rows(dd, M) for dd in d2])
    neigh = F.gather_rows(kpts, nn)                       # [B, n, M, 3]
    diff = F.reshape(kpts, (bsz, n, 1, 3)) - neigh
    mean_d = F.mean(F.l2norm(diff, axis=-1), axis=(1, 2))
    clamped = F.where(mean_d.data > eps, mean_d, eps)
    out = 1.0 / clamped
    return F.reshape(out, ()) if squeeze else out


def _smallest_rows(d: np.ndarray, k: int) -> np.ndarray:
    return np.argsort(d, axis=1, kind="stable")[:, :k]


def diversity_loss(kpts: Tensor, eps: float = SEP_EPS) -> Tensor:
    """Reciprocal of the mean distance over all keypoint pairs."""
    bsz, n, _ = kpts.shape
    diff = F.reshape(kpts, (bsz, n, 1, 3)) - F.reshape(kpts, (bsz, 1, n, 3))
    dist = F.l2norm(diff, axis=-1)
    mean_d = F.sum(dist, axis=(1, 2)) * (1.0 / (n * (n - 1)))
    return 1.0 / F.where(mean_d.data > eps, mean_d, eps)


def coverage_loss(kpts: Tensor, cloud) -> Tensor:
    """One-sided Chamfer from keypoints to the observed cloud."""
    return geometry.one_sided_chamfer(kpts, cloud)


# -- aggregation stages -----------------------------------------------------------

def keypoint_neighbors(kpt_coords: np.ndarray, cloud: np.ndarray, K: int) -> np.ndarray:
    """Indices of the K nearest cloud points per keypoint; [B, N_kpt, K]."""
    if K > cloud.shape[-2]:
        raise ArgumentError(f"K={K} exceeds cloud size {cloud.shape[-2]}")
    d = geometry.pairwise_sqdist(np.asarray(kpt_coords, dtype=np.float64), np.asarray(cloud, dtype=np.float64))
    return np.stack([geometry._smallest_k(dd, K) for dd in d])


def lkfa_forward(reg: ParamRegistry, cfg: TrainConfig, stage: int, feats: Tensor, coords: Tensor,
                 fused: Tensor, cloud: np.ndarray, nbr: np.ndarray) -> Tensor:
    """Local aggregation over the K nearest cloud points of each keypoint.

    ``cloud`` is the centred [B, N, 3] cloud, ``nbr`` the [B, N_kpt, K] neighbour indices.
    """
    p = f"stage{stage}.lkfa"
    feats = feats + apply_mlp(reg, f"{p}.pos", coords)
    pool = group_pool if _HAVE_NUMBA else group_pool_reference
    pooled = pool(fused, cloud.astype(reg.dtype), coords, nbr, feats, reg[f"{p}.alpha"], reg[f"{p}.beta"])
    return feats + apply_mlp(reg, f"{p}.out", pooled)


def group_pool_reference(fused: Tensor, cloud: np.ndarray, coords: Tensor, nbr: np.ndarray, feats: Tensor,
                         alpha: Tensor, beta: Tensor) -> Tensor:
    """Composite-op version of :func:`group_pool`: gather, normalise, affine, max over K."""
    bsz, nk, d = feats.shape
    K = nbr.shape[-1]
    fk = F.gather_rows(fused, nbr)                                   # [B, nk, K, d]
    # neighbour coordinates relative to the keypoint (differentiable in the keypoint)
    pk = F.gather_rows(Tensor(cloud), nbr) - F.reshape(coords, (bsz, nk, 1, 3))
    group = F.normalize(F.concat([fk, pk], axis=-1), axes=(-2, -1), eps=GROUP_EPS, use_std=True)
    centre = F.broadcast_to(F.reshape(feats, (bsz, nk, 1, d)), (bsz, nk, K, d))
    expanded = F.concat([group, centre], axis=-1)                     # [B, nk, K, 2d+3]
    expanded = expanded * alpha + beta
    return F.max(expanded, axis=2)


def group_pool(fused: Tensor, cloud: np.ndarray, coords: Tensor, nbr: np.ndarray, feats: Tensor,
               alpha: Tensor, beta: Tensor) -> Tensor:
    """Fused LKFA grouping; [B, N_kpt, 2d+3].

    Each keypoint's group stacks the features of its K neighbours with their
    offsets from the keypoint, is normalised by (std + eps) over the whole
    group, then scaled, shifted and max-pooled over K.  The keypoint's own
    feature is appended (scaled and shifted) to every group.
    """
    dt = fused.dtype
    fu = np.ascontiguousarray(fused.data)
    cl = np.ascontiguousarray(cloud, dtype=dt)
    co = np.ascontiguousarray(coords.data)
    fe = np.ascontiguousarray(feats.data)
    al, be = alpha.data, beta.data
    nb = np.ascontiguousarray(nbr, dtype=np.int64)
    out, arg, mu, std = _group_pool_fwd(fu, cl, co, nb, fe, al, be, dt.type(GROUP_EPS))
    add_flops("norm", 8 * nb.size * (fu.shape[-1] + 3))

    def bw(g):
        g = np.ascontiguousarray(g)
        return _group_pool_bwd(g, fu, cl, co, nb, fe, al, arg, mu, std, dt.type(GROUP_EPS))

    return make_result(out, (fused, coords, feats, alpha, beta), bw, "group_pool")


if _HAVE_NUMBA:
    @numba.njit(cache=True)
    def _group_pool_fwd(fused, cloud, coords, nbr, feats, alpha, beta, eps):  # pragma: no cover - compiled
        bsz, nk, K = nbr.shape
        d = fused.shape[2]
        c3 = d + 3
        cnt = K * c3
        out = np.empty((bsz, nk, c3 + d), dtype=fused.dtype)
        arg = np.empty((bsz, nk, c3), dtype=np.int64)
        mu = np.empty((bsz, nk), dtype=fused.dtype)
        std = np.empty((bsz, nk), dtype=fused.dtype)
        z = np.empty((K, c3), dtype=fused.dtype)
        for b in range(bsz):
            for k in range(nk):
                tot = 0.0
                for q in range(K):
                    r = nbr[b, k, q]
                    for c in range(d):
                        z[q, c] = fused[b, r, c]
                        tot += z[q, c]
                    for c in range(3):
                        z[q, d + c] = cloud[b, r, c] - coords[b, k, c]
                        tot += z[q, d + c]
                m = tot / cnt
                sq = 0.0
                for q in range(K):
                    for c in range(c3):
                        z[q, c] -= m
                        sq += z[q, c] * z[q, c]
                sd = np.sqrt(sq / cnt)
                den = sd + eps
                mu[b, k] = m
                std[b, k] = sd
                for c in range(c3):
                    best = alpha[c] * (z[0, c] / den) + beta[c]
                    bi = 0
                    for q in range(1, K):
                        v = alpha[c] * (z[q, c] / den) + beta[c]
                        if v > best:
                            best = v
                            bi = q
                    out[b, k, c] = best
                    arg[b, k, c] = bi
                for c in range(d):
                    out[b, k, c3 + c] = alpha[c3 + c] * feats[b, k, c] + beta[c3 + c]
        return out, arg, mu, std

    @numba.njit(cache=True)
    def _group_pool_bwd(g, fused, cloud, coords, nbr, feats, alpha, arg, mu, std, eps):  # pragma: no cover
        bsz, nk, K = nbr.shape
        d = fused.shape[2]
        c3 = d + 3
        cnt = K * c3
        g_fused = np.zeros_like(fused)
        g_coords = np.zeros_like(coords)
        g_feats = np.empty_like(feats)
        g_alpha = np.zeros_like(alpha)
        g_beta = np.zeros_like(alpha)
        z = np.empty((K, c3), dtype=fused.dtype)
        gz = np.empty(c3, dtype=fused.dtype)
        for b in range(bsz):
            for k in range(nk):
                m = mu[b, k]
                sd = std[b, k]
                den = sd + eps
                for q in range(K):
                    r = nbr[b, k, q]
                    for c in range(d):
                        z[q, c] = fused[b, r, c] - m
                    for c in range(3):
                        z[q, d + c] = cloud[b, r, c] - coords[b, k, c] - m
                # the pooled gradient reaches one neighbour per channel
                gsum = 0.0
                gxc = 0.0
                for c in range(c3):
                    gc = g[b, k, c]
                    q = arg[b, k, c]
                    g_beta[c] += gc
                    g_alpha[c] += gc * (z[q, c] / den)
                    gz[c] = gc * alpha[c]
                    gsum += gz[c]
                    gxc += gz[c] * z[q, c]
                for c in range(d):
                    gc = g[b, k, c3 + c]
                    g_beta[c3 + c] += gc
                    g_alpha[c3 + c] += gc * feats[b, k, c]
                    g_feats[b, k, c] = gc * alpha[c3 + c]
                gd = -gxc / (den * den)
                lin = gd / (cnt * sd) if sd > 0 else 0.0
                shift = gsum / (cnt * den)
                for q in range(K):
                    r = nbr[b, k, q]
                    for c in range(c3):
                        v = lin * z[q, c] - shift
                        if arg[b, k, c] == q:
                            v += gz[c] / den
                        if c < d:
                            g_fused[b, r, c] += v
                        else:
                            g_coords[b, k, c - d] -= v
        return g_fused, g_coords, g_feats, g_alpha, g_beta


def fsf(x: Tensor) -> Tensor:
    """Reverse the channel order of every row; row order is kept."""
    return F.flip(x, axis=-1)


def psf(x: Tensor) -> Tensor:
    """Reverse the order of the sequence (keypoint) axis."""
    return F.flip(x, axis=-2)


def gkfa_forward(reg: ParamRegistry, cfg: TrainConfig, stage: int, local: Tensor) -> Tensor:
    """Global aggregation: forward scan + scan over the flipped sequence + residual."""
    p = f"stage{stage}.gkfa"
    # one pre-norm shared by both scans, so the uni arm lacks exactly the backward scan's parameters
    h = apply_layer_norm(reg, f"{p}.ln", local)
    if cfg.attention_gkfa:
        return local + F.multi_head_attention(h, h, h, attention_params(reg, f"{p}.attn"), cfg.heads)
    out = local + selective_scan(h, ssm_params(reg, f"{p}.scan_a"))
    if cfg.uni_mamba:
        return out
    flip = psf if cfg.psf_instead_of_fsf else fsf
    back = selective_scan(flip(h), ssm_params(reg, f"{p}.scan_b"))
    if cfg.reflip_backward:
        back = flip(back)
    return out + back


def reconstruct(reg: ParamRegistry, cfg: TrainConfig, stage: int, glob: Tensor, coords: Tensor,
                cloud: np.ndarray) -> tuple[Tensor, Tensor]:
    """Dense reconstruction from keypoints; returns (P_rec [B, N_rec, 3], L_sim [B]).

    The head emits ``m`` offsets per keypoint at once, which equals applying
    one MLP to ``m`` copies of the feature with a copy-specific output layer.
    """
    bsz, nk, _ = coords.shape
    m = cfg.m
    offsets = apply_mlp(reg, f"stage{stage}.rec", glob)                # [B, nk, 3m]
    offsets = F.reshape(offsets, (bsz, nk * m, 3))
    base = F.repeat(coords, m, axis=1)
    p_rec = base + offsets
    return p_rec, geometry.chamfer(Tensor(cloud.astype(reg.dtype)), p_rec)


def stack_forward(reg: ParamRegistry, cfg: TrainConfig, enc: EncoderOutput, kpts: KeypointSet,
                  stages: int | None = None) -> tuple[Tensor, Tensor]:
    """Run the LKFA/GKFA stages; returns (final keypoint features, mean per-stage L_sim [B])."""
    S = cfg.S if stages is None else stages
    cloud = enc.centered
    nbr = keypoint_neighbors(kpts.coords.data, cloud, cfg.K)
    feats = kpts.feats
    l_sim = None
    for s in range(S):
        local = lkfa_forward(reg, cfg, s, feats, kpts.coords, enc.fused, cloud, nbr)
        feats = gkfa_forward(reg, cfg, s, local)
        _, ls = reconstruct(reg, cfg, s, feats, kpts.coords, cloud)
        l_sim = ls if l_sim is None else l_sim + ls
    return feats, l_sim * (1.0 / S)
