"""Total objective: per-voxel MSE plus weighted multi-level perceptual loss.

Each path (FDK reference / generated volume) is collapsed to a 3-channel
2D image by its own trainable dimension-shrinkage convolution (a full
first-axis N1x1x1 kernel with bias), standardised by the reference path's
per-channel statistics, and pushed through a frozen VGG-11-topology
feature extractor. The perceptual term at tap i is the mean squared
difference of the i-th relu output; the K = 8 terms are mixed by the
weight vector w and scaled by alpha. Every squared norm is a mean over
elements so the two loss terms stay comparable across resolutions.

Extractor weights come from a CBCTPAR1 checkpoint when provided, else
Glorot-normal frozen random weights from a recorded seed (the ImageNet
pretraining itself is out of scope for this artifact).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (ParamStore, Tensor, add, concat, conv2d, conv3d,
                       max_pool2d, mse, mul, mul_scalar, relu, reshape,
                       tensor_sum)
from .io import load_params

# VGG-11 feature stages: (in, out) channels per 3x3 convolution; an
# interior 2x2 max-pool follows stages 1, 2, 4 and 6 (1-based).
VGG11_STAGES = ((3, 64), (64, 128), (128, 256), (256, 256),
                (256, 512), (512, 512), (512, 512), (512, 512))
_POOL_AFTER = frozenset({0, 1, 3, 5})
K_LEVELS = len(VGG11_STAGES)
MIN_FEATURE_DIM = 32


@dataclass
class DSConvParams:
    """One dimension-shrinkage convolution: (N1, N2, N3) -> (3, N2, N3)."""

    n1: int
    params: ParamStore = field(repr=False)

    @property
    def weight(self) -> Tensor:
        return self.params["w"]

    @property
    def bias(self) -> Tensor:
        return self.params["b"]


def init_dsconv(n1: int, seed: int) -> DSConvParams:
    rng = np.random.default_rng(seed)
    std = np.sqrt(2.0 / (n1 + 3 * n1))
    ps = ParamStore()
    ps.add("w", rng.normal(0.0, std, size=(3, 1, n1, 1, 1)).astype(np.float32))
    ps.add("b", np.zeros(3, dtype=np.float32))
    return DSConvParams(n1=n1, params=ps)


def dsconv_apply(d: DSConvParams, v: Tensor) -> Tensor:
    """Collapse the first volume axis into 3 channels."""
    if v.data.ndim != 3 or v.shape[0] != d.n1:
        raise ValueError(f"dsconv: volume {v.shape} does not match N1={d.n1}")
    x = reshape(v, (1,) + v.shape)
    out = conv3d(x, d.weight, d.bias)          # (3, 1, N2, N3)
    return reshape(out, (3, v.shape[1], v.shape[2]))


@dataclass
class FeatureExtractor:
    """Frozen 2D feature network; taps are the K relu outputs."""

    params: ParamStore = field(repr=False)
    seed: int | None = None
    source: str = "random"

    @property
    def k_levels(self) -> int:
        return K_LEVELS


def init_feature_extractor(seed: int = 0, weights_path: str | None = None) -> FeatureExtractor:
    ps = ParamStore()
    if weights_path is not None:
        arrays = load_params(weights_path)
        for i, (cin, cout) in enumerate(VGG11_STAGES, start=1):
            for suffix, shape in ((f"conv{i}.w", (cout, cin, 3, 3)), (f"conv{i}.b", (cout,))):
                if suffix not in arrays:
                    raise ValueError(f"extractor checkpoint missing tensor {suffix!r}")
                a = np.asarray(arrays[suffix], dtype=np.float32)
                if a.shape != shape:
                    raise ValueError(
                        f"extractor tensor {suffix!r} has shape {a.shape}, expected {shape}"
                    )
                ps.add(suffix, Tensor(a, requires_grad=False))
        return FeatureExtractor(params=ps, seed=None, source=weights_path)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    for i, (cin, cout) in enumerate(VGG11_STAGES, start=1):
        std = np.sqrt(2.0 / (cin * 9 + cout * 9))
        w = rng.normal(0.0, std, size=(cout, cin, 3, 3)).astype(np.float32)
        ps.add(f"conv{i}.w", Tensor(w, requires_grad=False))
        ps.add(f"conv{i}.b", Tensor(np.zeros(cout, dtype=np.float32), requires_grad=False))
    return FeatureExtractor(params=ps, seed=seed, source="random")


def extract_features(fe: FeatureExtractor, img: Tensor) -> list[Tensor]:
    """The K relu outputs in network order; gradients flow into img only."""
    if img.data.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"extract_features: expected (3, H, W), got {img.shape}")
    if min(img.shape[1], img.shape[2]) < MIN_FEATURE_DIM:
        raise ValueError(
            f"extract_features: spatial dims {img.shape[1:]} too small, "
            f"need >= {MIN_FEATURE_DIM} to survive the pooling stack"
        )
    taps: list[Tensor] = []
    h = img
    for i in range(K_LEVELS):
        h = conv2d(h, fe.params[f"conv{i + 1}.w"], fe.params[f"conv{i + 1}.b"], pad=(1, 1))
        h = relu(h)
        taps.append(h)
        if i in _POOL_AFTER:
            h = max_pool2d(h)
    return taps


@dataclass
class LossWeights:
    """Per-level perceptual weights w (on the probability simplex) and alpha."""

    w: Tensor
    alpha: float = 1.0

    @staticmethod
    def uniform(k: int = K_LEVELS, alpha: float = 1.0, trainable: bool = False) -> "LossWeights":
        return LossWeights(
            w=Tensor(np.full(k, 1.0 / k, dtype=np.float32), requires_grad=trainable),
            alpha=alpha,
        )

    def validate(self) -> None:
        w = self.w.data
        if w.min() < 0:
            raise ValueError(f"loss weights must be non-negative, min={w.min()}")
        if abs(float(w.sum()) - 1.0) > 1e-6:
            raise ValueError(f"loss weights must sum to 1, got {w.sum()}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be non-negative, got {self.alpha}")


@dataclass(frozen=True)
class LossParts:
    """Float values of the loss terms at one evaluation."""

    total: float
    mse: float
    pl: tuple[float, ...]


def _standardize(img: Tensor, mu: np.ndarray, inv_sd: np.ndarray) -> Tensor:
    return mul(add(img, Tensor(-mu)), Tensor(inv_sd))


def total_loss(x_ref, x_gen: Tensor, ds_ref: DSConvParams, ds_gen: DSConvParams,
               fe: FeatureExtractor, lw: LossWeights,
               standardize: bool = True) -> tuple[Tensor, LossParts]:
    """Mean-squared term plus alpha * sum_i w_i * perceptual term i.

    x_ref is a constant reference array; x_gen the differentiable volume.
    Gradients reach x_gen's producer, both DSConvs, and w (when trainable);
    the extractor stays frozen. Returns the scalar loss node and the term
    values for logging.
    """
    ref = x_ref if isinstance(x_ref, Tensor) else Tensor(np.asarray(x_ref, dtype=np.float32))
    if ref.shape != x_gen.shape:
        raise ValueError(f"total_loss: reference {ref.shape} vs generated {x_gen.shape}")

    mse_term = mse(ref, x_gen)
    if lw.alpha == 0.0:
        k = lw.w.shape[0]
        parts = LossParts(total=mse_term.item(), mse=mse_term.item(), pl=(0.0,) * k)
        return mse_term, parts

    img_ref = dsconv_apply(ds_ref, ref)
    img_gen = dsconv_apply(ds_gen, x_gen)
    if standardize:
        stats = img_ref.data.reshape(3, -1)
        mu = stats.mean(axis=1).reshape(3, 1, 1).astype(np.float32)
        sd = stats.std(axis=1).reshape(3, 1, 1).astype(np.float32)
        inv = (1.0 / (sd + np.float32(1e-5))).astype(np.float32)
        img_ref = _standardize(img_ref, mu, inv)
        img_gen = _standardize(img_gen, mu, inv)
    feats_ref = extract_features(fe, img_ref)
    feats_gen = extract_features(fe, img_gen)
    if lw.w.shape[0] != len(feats_ref):
        raise ValueError(f"total_loss: {lw.w.shape[0]} weights for {len(feats_ref)} levels")

    terms = [mse(fr, fg) for fr, fg in zip(feats_ref, feats_gen)]
    terms_vec = concat([reshape(t, (1,)) for t in terms], axis=0)
    pl = tensor_sum(mul(terms_vec, lw.w))
    loss = add(mse_term, mul_scalar(pl, lw.alpha))
    parts = LossParts(total=loss.item(), mse=mse_term.item(),
                      pl=tuple(t.item() for t in terms))
    return loss, parts
