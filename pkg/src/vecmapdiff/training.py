"""AdamW training of the denoiser on noised ground-truth queries."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .denoiser import ENCODER_PARAMS, DenoiserModel, LossParts, decoder_loss, forward_and_loss
from .diffusion import NoiseSchedule, PaddingStrategy, forward_q, pad_queries

log = logging.getLogger(__name__)


class NumericAbort(RuntimeError):
    """Raised when the loss or parameters stop being finite."""


@dataclass
class TrainConfig:
    epochs: int = 80
    lr: float = 1e-3
    min_lr: float = 0.0
    warmup_steps: int = 0
    weight_decay: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip: float = 1.0
    lambda_cls: float = 0.5
    freeze_encoder: bool = False
    pretrained_encoder_path: str | None = None
    padding: str = "gaussian"
    deep_supervision: bool = True
    matching: bool = True  # bipartite query-to-GT assignment instead of identity
    t_range: tuple[int, int] | None = None  # training timesteps; None samples U{1..T}
    timesteps_per_scene: int = 2  # independent noised query sets per step, sharing one encoder pass
    val_every: int = 0  # epochs; 0 disables periodic validation
    log_every: int = 100

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.lambda_cls < 0:
            raise ValueError("lambda_cls must be non-negative")
        if self.timesteps_per_scene < 1:
            raise ValueError("timesteps_per_scene must be at least 1")


class AdamW:
    def __init__(self, params: dict, lr: float, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-2,
                 frozen: Sequence[str] = ()):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.frozen = set(frozen)
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            if k in self.frozen:
                continue
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            decay = self.wd if p.data.ndim > 1 else 0.0
            p.data -= (self.lr * ((m / c1) / (np.sqrt(v / c2) + self.eps) + decay * p.data)).astype(p.data.dtype)


def cosine_lr(step: int, total: int, base: float, min_lr: float = 0.0, warmup: int = 0) -> float:
    if warmup and step < warmup:
        return base * (step + 1) / warmup
    frac = (step - warmup) / max(1, total - warmup)
    return min_lr + 0.5 * (base - min_lr) * (1.0 + math.cos(math.pi * min(frac, 1.0)))


@dataclass
class TrainingSample:
    """One scene as the trainer sees it."""

    obs: np.ndarray
    gt: object  # VectorMap


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["step", "loss_line", "loss_cls", "lr", "val_mAP"])
            w.writeheader()
            for r in self.rows:
                w.writerow(r)


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


def train(model: DenoiserModel, data: Sequence[TrainingSample], cfg: TrainConfig, schedule: NoiseSchedule,
          seed: int = 0, validate: Callable[[DenoiserModel], float] | None = None,
          checkpoint_dir: str | Path | None = None) -> TrainLog:
    """Train in place with batch size 1; returns the metrics log.

    Each step draws a scene, a timestep t ~ U{1..T}, pads and noises the GT queries
    and takes one AdamW step on the line + class loss.
    """
    if len(data) == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng([seed, 11])
    padding = PaddingStrategy(cfg.padding)
    frozen = ENCODER_PARAMS if cfg.freeze_encoder else ()
    opt = AdamW(model.params, cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay, frozen)
    total = cfg.epochs * len(data)
    out = TrainLog()
    run_line = run_cls = 0.0
    step = 0
    for epoch in range(cfg.epochs):
        for idx in rng.permutation(len(data)):
            sample = data[idx]
            t_lo, t_hi = cfg.t_range or (1, schedule.T)
            draws = []
            for _ in range(cfg.timesteps_per_scene):
                t = int(rng.integers(t_lo, t_hi + 1))
                queries = pad_queries(sample.gt, model.cfg.n_queries, padding, rng, model.cfg.n_points)
                draws.append((forward_q(schedule.signal_scale * queries.coords, t, schedule, rng), t, queries))
            for p in model.params.values():
                p.zero_grad()
            try:
                loss = _step_loss(model, sample.obs, draws, cfg)
            except FloatingPointError as exc:
                _abort(model, checkpoint_dir, step, str(exc))
            if not math.isfinite(float(loss.total.data)):
                _abort(model, checkpoint_dir, step, "non-finite loss")
            loss.total.backward()
            grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in model.params.items()}
            for k in frozen:
                grads[k][...] = 0.0
            clip_grads(grads, cfg.grad_clip)
            opt.lr = cosine_lr(step, total, cfg.lr, cfg.min_lr, cfg.warmup_steps)
            opt.step(grads)
            run_line = 0.98 * run_line + 0.02 * loss.line if step else loss.line
            run_cls = 0.98 * run_cls + 0.02 * loss.cls if step else loss.cls
            step += 1
            if cfg.log_every and step % cfg.log_every == 0:
                out.rows.append({"step": step, "loss_line": run_line, "loss_cls": run_cls, "lr": opt.lr, "val_mAP": ""})
                log.info("step %d line %.4f cls %.4f lr %.2e", step, run_line, run_cls, opt.lr)
        if not all(np.all(np.isfinite(p.data)) for p in model.params.values()):
            _abort(model, checkpoint_dir, step, "non-finite parameters")
        if validate is not None and cfg.val_every and (epoch + 1) % cfg.val_every == 0:
            val = validate(model)
            out.rows.append({"step": step, "loss_line": run_line, "loss_cls": run_cls, "lr": opt.lr, "val_mAP": val})
            log.info("epoch %d val mAP %.4f", epoch + 1, val)
    return out


def _step_loss(model: DenoiserModel, obs, draws, cfg: TrainConfig) -> LossParts:
    """Mean loss over the noised query sets of one scene."""
    if len(draws) == 1:
        x_t, t, queries = draws[0]
        return forward_and_loss(model, obs, x_t, t, queries, cfg.lambda_cls, cfg.deep_supervision, cfg.matching).loss
    latent = model.encoder_forward(obs)
    parts = [decoder_loss(model, latent, x_t, t, q, cfg.lambda_cls, cfg.deep_supervision, cfg.matching)[2]
             for x_t, t, q in draws]
    n = len(parts)
    total = ad.mul(parts[0].total, 1.0 / n)
    for lp in parts[1:]:
        total = ad.add(total, ad.mul(lp.total, 1.0 / n))
    return LossParts(total, sum(lp.line for lp in parts) / n, sum(lp.cls for lp in parts) / n)


def _abort(model: DenoiserModel, checkpoint_dir, step: int, why: str):
    path = None
    if checkpoint_dir is not None:
        path = Path(checkpoint_dir) / f"abort_step{step}.ckpt"
        model.save(path, {"abort": why, "step": step})
    raise NumericAbort(f"{why} at step {step}" + (f"; diagnostic checkpoint {path}" if path else ""))
