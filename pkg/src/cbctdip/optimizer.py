"""Adaptive re-weighting DIP loop with GD and ADAM backends.

Per iteration: project the perceptual weights onto the probability
simplex (reweight mode), run the generator, evaluate the total loss,
backpropagate through theta, both DSConvs and w jointly, and update with
the chosen backend. The projection is a value operation applied at the
start of the next iteration, before the loss is computed. Weight decay
is decoupled (AdamW style) and never touches w.

Three weighting modes:
  w_zero    perceptual stack disabled (alpha forced to 0), pure MSE;
  w_fixed   w frozen at uniform 1/K;
  reweight  w trainable, clipped non-negative and renormalised each step.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ParamStore, grad, merge_stores
from .generator import GeneratorState, generate, generate_tensor
from .geometry import Volume
from .loss import (DSConvParams, FeatureExtractor, K_LEVELS, LossWeights,
                   init_dsconv, init_feature_extractor, total_loss)
from .metrics import psnr, ssim

log = logging.getLogger(__name__)

BACKENDS = ("gd", "adam")
MODES = ("w_zero", "w_fixed", "reweight")


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-3
    decay: float = 1e-5
    n_iters: int = 2000
    backend: str = "adam"
    mode: str = "reweight"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    log_every: int = 10
    seed: int = 0
    grad_clip: bool = False           # optional global-norm clip on gradients
    grad_clip_norm: float = 1.0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.n_iters < 0:
            raise ValueError(f"n_iters must be >= 0, got {self.n_iters}")
        if self.backend not in BACKENDS:
            raise ValueError(f"backend {self.backend!r} not in {BACKENDS}")
        if self.mode not in MODES:
            raise ValueError(f"mode {self.mode!r} not in {MODES}")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0
    extractor_seed: int = 0
    extractor_weights: str | None = None
    standardize: bool = True


@dataclass
class RunLogRow:
    iteration: int
    total: float
    mse: float
    pl: tuple[float, ...]
    w: tuple[float, ...]
    psnr_ref: float
    ssim_ref: float
    psnr_gt: float | None = None
    ssim_gt: float | None = None


@dataclass
class RunLog:
    """Per-iteration loss terms, weights and image-quality metrics."""

    k: int = K_LEVELS
    rows: list[RunLogRow] = field(default_factory=list)

    def header(self) -> list[str]:
        cols = ["iteration", "total", "mse"]
        cols += [f"pl_{i + 1}" for i in range(self.k)]
        cols += [f"w_{i + 1}" for i in range(self.k)]
        cols += ["psnr_ref", "ssim_ref", "psnr_gt", "ssim_gt"]
        return cols

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(self.header())
            for r in self.rows:
                row = [r.iteration, repr(r.total), repr(r.mse)]
                row += [repr(v) for v in r.pl]
                row += [repr(v) for v in r.w]
                row += [repr(r.psnr_ref), repr(r.ssim_ref)]
                row += ["" if r.psnr_gt is None else repr(r.psnr_gt)]
                row += ["" if r.ssim_gt is None else repr(r.ssim_gt)]
                writer.writerow(row)

    def psnr_ref_series(self) -> np.ndarray:
        return np.array([r.psnr_ref for r in self.rows])


def count_dips(values, threshold: float = 0.5) -> int:
    """Drops larger than `threshold` dB between consecutive logged points."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) < 2:
        return 0
    return int(np.sum(v[1:] < v[:-1] - threshold))


def reweight_step(w: np.ndarray) -> np.ndarray:
    """Clip to non-negative, then normalise to unit sum (uniform fallback)."""
    w = np.asarray(w, dtype=np.float32)
    clipped = np.clip(w, 0.0, None)
    s = float(clipped.sum(dtype=np.float64))
    if s == 0.0:
        return np.full(w.shape, 1.0 / w.size, dtype=np.float32)
    return (clipped / np.float32(s)).astype(np.float32)


def gd_update(params: ParamStore, lr: float, decay: float = 0.0,
              decay_exclude: frozenset[str] = frozenset()) -> None:
    """Plain gradient descent with decoupled weight decay."""
    for name, t in params.items():
        if t.grad is None:
            raise ValueError(f"gd_update: parameter {name!r} has no gradient")
        if t.grad.shape != t.data.shape:
            raise ValueError(
                f"gd_update: grad {t.grad.shape} vs param {t.data.shape} for {name!r}"
            )
        t.data = t.data - np.float32(lr) * t.grad
        if decay and name not in decay_exclude:
            t.data = t.data - np.float32(lr * decay) * t.data


class AdamState:
    """First/second moment estimates per parameter, persisted across steps."""

    def __init__(self, params: ParamStore):
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.t = 0


def adam_update(params: ParamStore, state: AdamState, cfg: OptimizerConfig,
                decay_exclude: frozenset[str] = frozenset()) -> None:
    """Bias-corrected ADAM with decoupled weight decay."""
    state.t += 1
    bc1 = 1.0 - cfg.beta1 ** state.t
    bc2 = 1.0 - cfg.beta2 ** state.t
    for name, t in params.items():
        g = t.grad
        if g is None:
            raise ValueError(f"adam_update: parameter {name!r} has no gradient")
        if g.shape != t.data.shape:
            raise ValueError(
                f"adam_update: grad {g.shape} vs param {t.data.shape} for {name!r}"
            )
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        mhat = m / bc1
        vhat = v / bc2
        t.data = t.data - np.float32(cfg.lr) * (mhat / (np.sqrt(vhat) + cfg.eps)).astype(np.float32)
        if cfg.decay and name not in decay_exclude:
            t.data = t.data - np.float32(cfg.lr * cfg.decay) * t.data


def _clip_gradients(params: ParamStore, max_norm: float) -> None:
    total = 0.0
    for _, t in params.items():
        if t.grad is not None:
            total += float(np.sum(t.grad.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0:
        scale = np.float32(max_norm / norm)
        for _, t in params.items():
            if t.grad is not None:
                t.grad *= scale


def _check_finite(parts, iteration: int) -> None:
    if not math.isfinite(parts.mse):
        raise FloatingPointError(f"non-finite MSE term at iteration {iteration}")
    for i, v in enumerate(parts.pl, start=1):
        if not math.isfinite(v):
            raise FloatingPointError(
                f"non-finite perceptual term {i} at iteration {iteration}"
            )
    if not math.isfinite(parts.total):
        raise FloatingPointError(f"non-finite total loss at iteration {iteration}")
    if parts.total < 0:
        # impossible while w >= 0 and alpha >= 0; fail loudly if it happens
        raise FloatingPointError(f"negative total loss at iteration {iteration}")


def dip_reconstruct(x_ref: Volume, gen: GeneratorState, loss_cfg: LossConfig,
                    opt: OptimizerConfig, gt: Volume | None = None,
                    fe: FeatureExtractor | None = None) -> tuple[Volume, RunLog]:
    """Optimise the generator against the reference; returns (volume, log).

    The reference must be normalized to [0, 1]. Logged rows cover
    iteration 0 (untrained output), every log_every-th iteration, and the
    final iterate; metrics at row t are computed on the pre-update volume
    paired with the loss evaluated at the same parameters.
    """
    ref = x_ref.data
    if ref.min() < 0.0 or ref.max() > 1.0 + 1e-6:
        raise ValueError(
            f"reference must be normalized to [0, 1], got range "
            f"[{ref.min():.4g}, {ref.max():.4g}]"
        )
    if x_ref.grid.shape != gen.grid.shape:
        raise ValueError(f"reference grid {x_ref.grid.shape} vs generator {gen.grid.shape}")

    runlog = RunLog(k=K_LEVELS)
    if opt.n_iters == 0:
        return generate(gen), runlog

    if fe is None:
        fe = init_feature_extractor(seed=loss_cfg.extractor_seed,
                                    weights_path=loss_cfg.extractor_weights)
    ds_ref = init_dsconv(gen.grid.nx, seed=_spawn_seed(opt.seed, 2))
    ds_gen = init_dsconv(gen.grid.nx, seed=_spawn_seed(opt.seed, 3))

    alpha = 0.0 if opt.mode == "w_zero" else loss_cfg.alpha
    lw = LossWeights.uniform(K_LEVELS, alpha=alpha, trainable=opt.mode == "reweight")

    parts_stores = [("gen", gen.params), ("ds_gen", ds_gen.params),
                    ("ds_ref", ds_ref.params)]
    decay_exclude = set()
    if opt.mode == "reweight":
        w_store = ParamStore()
        w_store.add("w", lw.w)
        parts_stores.append(("pl", w_store))
        decay_exclude.add("pl.w")
    trainable = merge_stores(parts_stores)
    decay_exclude = frozenset(decay_exclude)
    adam_state = AdamState(trainable) if opt.backend == "adam" else None

    gt_data = gt.data if gt is not None else None
    initial_total = None
    warned_divergence = False

    def log_row(iteration: int, x: np.ndarray, parts) -> None:
        row = RunLogRow(
            iteration=iteration,
            total=parts.total, mse=parts.mse, pl=parts.pl,
            w=tuple(float(v) for v in lw.w.data),
            psnr_ref=psnr(x, ref, 1.0), ssim_ref=ssim(x, ref, 1.0),
            psnr_gt=None if gt_data is None else psnr(x, gt_data, 1.0),
            ssim_gt=None if gt_data is None else ssim(x, gt_data, 1.0),
        )
        runlog.rows.append(row)

    for it in range(opt.n_iters):
        if opt.mode == "reweight":
            lw.w.data = reweight_step(lw.w.data)
        x = generate_tensor(gen)
        loss, parts = total_loss(ref, x, ds_ref, ds_gen, fe, lw,
                                 standardize=loss_cfg.standardize)
        _check_finite(parts, it)
        if initial_total is None:
            initial_total = parts.total if parts.total > 0 else 1.0
        elif not warned_divergence and parts.total > 10.0 * initial_total:
            log.warning("total loss %.4g exceeds 10x its initial value %.4g "
                        "at iteration %d; continuing", parts.total, initial_total, it)
            warned_divergence = True
        if it % opt.log_every == 0:
            log_row(it, x.data, parts)
        grad(loss, trainable)
        if opt.grad_clip:
            _clip_gradients(trainable, opt.grad_clip_norm)
        if opt.backend == "adam":
            adam_update(trainable, adam_state, opt, decay_exclude)
        else:
            gd_update(trainable, opt.lr, opt.decay, decay_exclude)

    if opt.mode == "reweight":
        lw.w.data = reweight_step(lw.w.data)
    x = generate_tensor(gen)
    _, parts = total_loss(ref, x, ds_ref, ds_gen, fe, lw,
                          standardize=loss_cfg.standardize)
    _check_finite(parts, opt.n_iters)
    log_row(opt.n_iters, x.data, parts)
    return Volume(gen.grid, x.data), runlog


def _spawn_seed(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, stream]).generate_state(1)[0])
