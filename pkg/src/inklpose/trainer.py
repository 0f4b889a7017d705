"""Optimisation loop: cyclical learning rate, Adam, clipping, logging, checkpoints and evaluation."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from inklpose import metrics, synthdata
from inklpose.config import MODEL_KEYS, TrainConfig
from inklpose.errors import ConfigError, NumericError, ShapeError, StateError
from inklpose.geometry import SimTransform
from inklpose.model import InklPoseNet, InstanceCache, make_batch
from inklpose.substrate import checkpoint
from inklpose.substrate.params import ParamRegistry
from inklpose.substrate.tensor import backward, no_grad

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "lr", "L_sep", "L_surf", "L_sim", "L_map", "L_pose", "total")
CKPT_VERSION = 1


def cyclical_lr(step: int, cfg: TrainConfig) -> float:
    """Triangular schedule: lr_min at step 0, lr_max at cycle_len, back at 2 * cycle_len."""
    if step < 0:
        raise ConfigError(f"step must be nonnegative, got {step}")
    phase = (step % (2 * cfg.cycle_len)) / cfg.cycle_len
    frac = phase if phase <= 1.0 else 2.0 - phase
    return cfg.lr_min + (cfg.lr_max - cfg.lr_min) * frac


# -- Adam -------------------------------------------------------------------

@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ParamRegistry, grads: dict, lr: float, state: AdamState,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update; parameters without a gradient see a zero gradient."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter is {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data = p.data - (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)


def clip_gradients(grads: dict, max_norm: float) -> float:
    """Scale ``grads`` in place to global norm ``max_norm``; returns the norm before clipping."""
    total = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
    if not np.isfinite(total):
        raise NumericError("gradient norm is not finite")
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


# -- checkpoints ----------------------------------------------------------------

def save_checkpoint(path, net: InklPoseNet, opt: AdamState | None = None, step: int = 0,
                    rng: np.random.Generator | None = None) -> None:
    tensors = {f"param/{k}": v for k, v in net.reg.state().items()}
    if opt is not None:
        for k in opt.m:
            tensors[f"adam_m/{k}"] = opt.m[k]
            tensors[f"adam_v/{k}"] = opt.v[k]
    meta = {"version": CKPT_VERSION, "step": step, "adam_t": opt.t if opt else 0,
            "config": net.cfg.to_dict(), "rng": rng.bit_generator.state if rng is not None else None}
    tensors["meta"] = checkpoint.pack_json(meta)
    checkpoint.save(path, tensors)


@dataclass
class Checkpoint:
    cfg: TrainConfig
    params: dict
    opt: AdamState
    step: int
    rng_state: dict | None


def load_checkpoint(path) -> Checkpoint:
    raw = checkpoint.load(path)
    if "meta" not in raw:
        raise StateError(f"{path}: not a training checkpoint (no meta record)")
    meta = checkpoint.unpack_json(raw["meta"])
    cfg = TrainConfig(**meta["config"])
    params = {k[6:]: v for k, v in raw.items() if k.startswith("param/")}
    opt = AdamState(t=int(meta["adam_t"]))
    for k, v in raw.items():
        if k.startswith("adam_m/"):
            opt.m[k[7:]] = v
        elif k.startswith("adam_v/"):
            opt.v[k[7:]] = v
    return Checkpoint(cfg, params, opt, int(meta["step"]), meta["rng"])


def load_model(path, cfg: TrainConfig | None = None) -> tuple[InklPoseNet, Checkpoint]:
    """Network from a checkpoint; ``cfg`` (if given) must agree on every model dimension."""
    ck = load_checkpoint(path)
    if cfg is not None:
        diff = [k for k in MODEL_KEYS if getattr(cfg, k) != getattr(ck.cfg, k)]
        if diff:
            raise ConfigError("checkpoint and config disagree on " +
                              ", ".join(f"{k} ({getattr(ck.cfg, k)} vs {getattr(cfg, k)})" for k in diff))
    net = InklPoseNet(ck.cfg)
    net.reg.load_state(ck.params)
    return net, ck


# -- training ---------------------------------------------------------------------

class Trainer:
    """Owns the network, optimiser state and rng stream of one training run."""

    def __init__(self, cfg: TrainConfig, samples, out_dir=None):
        self.cfg = cfg.validate()
        self.samples = list(samples)
        if not self.samples:
            raise ConfigError("training needs at least one sample")
        n_pts = {len(s.cloud) for s in self.samples}
        if n_pts != {cfg.n_points}:
            raise ShapeError(f"dataset clouds have {sorted(n_pts)} points, config expects {cfg.n_points}")
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.net = InklPoseNet(cfg)
        self.opt = AdamState()
        self.rng = np.random.default_rng([cfg.seed, 1])
        self.step = 0
        self.cache = InstanceCache(cfg)
        self.history: list[dict] = []

    # state ------------------------------------------------------------------
    def checkpoint_path(self, step: int) -> Path:
        return self.out_dir / f"ckpt_{step:06d}.inkl"

    def save(self) -> Path:
        path = self.checkpoint_path(self.step)
        save_checkpoint(path, self.net, self.opt, self.step, self.rng)
        save_checkpoint(self.out_dir / "latest.inkl", self.net, self.opt, self.step, self.rng)
        return path

    def resume(self, path) -> None:
        ck = load_checkpoint(path)
        diff = [k for k in MODEL_KEYS if getattr(self.cfg, k) != getattr(ck.cfg, k)]
        if diff:
            raise ConfigError(f"cannot resume: checkpoint differs on {', '.join(diff)}")
        self.net.reg.load_state(ck.params)
        self.opt = ck.opt
        self.step = ck.step
        if ck.rng_state is not None:
            self.rng.bit_generator.state = ck.rng_state
        if self.out_dir is not None:
            self._truncate_log(self.step)

    def _log_path(self) -> Path:
        return self.out_dir / "metrics.jsonl"

    def _truncate_log(self, step: int) -> None:
        p = self._log_path()
        if not p.exists():
            return
        keep = [line for line in p.read_text().splitlines() if line.strip() and json.loads(line)["step"] <= step]
        p.write_text("".join(line + "\n" for line in keep))

    # loop -------------------------------------------------------------------
    def draw_batch(self):
        n = len(self.samples)
        bs = min(self.cfg.batch_size, n)
        idx = self.rng.choice(n, size=bs, replace=False)
        chosen = [self.samples[i] for i in idx]
        if self.cfg.augment:
            chosen = [synthdata.augment(s, self.rng) for s in chosen]
        return make_batch(chosen, self.cfg, self.cache)

    def train_step(self) -> dict:
        lr = cyclical_lr(self.step, self.cfg)
        batch = self.draw_batch()
        net = self.net
        result = net.forward(batch)
        total, logged = net.loss(result)
        backward(total)
        grads = {k: p.grad for k, p in net.reg.items() if p.grad is not None}
        clip_gradients(grads, self.cfg.grad_clip)
        adam_step(net.reg, grads, lr, self.opt)
        net.reg.zero_grad()
        self.step += 1
        record = {"step": self.step, "lr": lr}
        record.update({k: logged[k] for k in LOG_FIELDS[2:]})
        return record

    def run(self, max_steps: int | None = None, callback=None) -> list[dict]:
        """Train up to ``max_steps`` (default ``cfg.max_steps``) total steps.

        A non-finite loss or gradient raises :class:`NumericError`; checkpoints
        already on disk are left untouched.  ``callback(trainer, record)`` runs
        after every step.
        """
        end = self.cfg.max_steps if max_steps is None else max_steps
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        fh = open(self._log_path(), "a", encoding="utf-8") if self.out_dir is not None else None
        try:
            while self.step < end:
                try:
                    record = self.train_step()
                except NumericError as exc:
                    raise NumericError(f"step {self.step + 1}: {exc}; last good checkpoint kept") from None
                self.history.append(record)
                if fh is not None and record["step"] % self.cfg.log_every == 0:
                    fh.write(json.dumps(record) + "\n")
                    fh.flush()
                if self.out_dir is not None and self.step % self.cfg.ckpt_every == 0:
                    self.save()
                if callback is not None:
                    callback(self, record)
            if self.out_dir is not None and self.step % self.cfg.ckpt_every != 0:
                self.save()
        finally:
            if fh is not None:
                fh.close()
        return self.history


def train(cfg: TrainConfig, samples, out_dir, resume=None, callback=None) -> Trainer:
    trainer = Trainer(cfg, samples, out_dir)
    if resume is not None:
        trainer.resume(resume)
    trainer.run(callback=callback)
    return trainer


# -- evaluation ------------------------------------------------------------------

def _batches(samples, size):
    for i in range(0, len(samples), size):
        yield samples[i:i + size]


def dataset_loss(net: InklPoseNet, samples, batch_size: int = 4) -> float:
    """Mean total loss over ``samples`` without augmentation or parameter updates."""
    cache = InstanceCache(net.cfg)
    totals = []
    with no_grad():
        for chunk in _batches(list(samples), batch_size):
            _, logged = net.loss(net.forward(make_batch(chunk, net.cfg, cache)))
            totals.append((logged["total"], len(chunk)))
    return sum(t * n for t, n in totals) / sum(n for _, n in totals)


def evaluate(net: InklPoseNet, samples, batch_size: int = 4) -> metrics.EvalReport:
    """Inference on ``samples`` (no augmentation) and the metric report."""
    samples = list(samples)
    if not samples:
        raise ConfigError("evaluation needs at least one sample")
    n_pts = {len(s.cloud) for s in samples}
    if n_pts != {net.cfg.n_points}:
        raise ShapeError(f"dataset clouds have {sorted(n_pts)} points, model expects {net.cfg.n_points}")
    cache = InstanceCache(net.cfg)
    rows = []
    with no_grad():
        for chunk in _batches(samples, batch_size):
            res = net.forward(make_batch(chunk, net.cfg, cache))
            R = res.pose.R.data.astype(np.float64)
            t = res.pose.t.data.astype(np.float64)
            s = res.pose.s.data.astype(np.float64)
            kerr = np.linalg.norm(res.pose.nocs_kpts.data.astype(np.float64) - res.nocs_gt.data, axis=-1)
            for i, smp in enumerate(chunk):
                sym = smp.category.symmetric
                pred = SimTransform(R[i], t[i], s[i])
                gt = SimTransform(smp.gt.R.astype(np.float64), smp.gt.t.astype(np.float64),
                                  smp.gt.s.astype(np.float64))
                rot, trans = metrics.pose_errors(pred, gt, sym)
                rows.append(metrics.InstanceResult(
                    category=smp.category.name, iou=metrics.iou3d(pred, gt, sym), rot_err_deg=rot,
                    trans_err_cm=trans, nocs_kpt_errors=[float(e) for e in kerr[i]],
                    instance_id=int(smp.instance_id)))
    return metrics.EvalReport(rows, metrics.aggregate(rows))
