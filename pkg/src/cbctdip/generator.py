"""Noise-to-volume image generators.

The main generator is a UNETR-style 3D transformer: fixed Gaussian noise
volumes are cut into non-overlapping patches, linearly embedded with a
learned positional embedding, encoded by pre-norm transformer blocks
(layer_norm -> multi-head self-attention -> residual, layer_norm -> MLP
-> residual), and decoded U-Net style. Skip features are tapped from
blocks ceil(n_blocks * k / 4), k = 1..4 (3/6/9/12 at twelve blocks);
each tap is brought to the decoder resolution by stride-2 transposed
convolutions, concatenated, and fused by two 3x3x3 convolutions with
batch norm and relu. The head is a 1x1x1 convolution with no activation.

A patch-based 3D U-Net over the same input patches serves as the
comparison baseline at comparable parameter count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (ParamStore, Tensor, add, avg_pool3d, batch_norm,
                       concat, conv3d, layer_norm, linear, matmul,
                       patchify_3d, relu, reshape,
                       scaled_dot_product_attention, transpose,
                       transposed_conv3d)
from .geometry import Volume, VolumeGrid


@dataclass(frozen=True)
class UNETRConfig:
    patch: int = 8
    embed_dim: int = 96
    n_heads: int = 4
    n_blocks: int = 4
    mlp_dim: int = 192
    decoder_channels: tuple[int, ...] = (32, 16, 8)
    in_channels: int = 16

    def __post_init__(self):
        if self.patch < 2 or (self.patch & (self.patch - 1)) != 0:
            raise ValueError(f"patch must be a power of two >= 2, got {self.patch}")
        if self.embed_dim % self.n_heads:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}"
            )
        if self.in_channels < 1 or self.n_blocks < 1:
            raise ValueError("in_channels and n_blocks must be >= 1")
        n_up = int(math.log2(self.patch))
        if len(self.decoder_channels) != n_up:
            raise ValueError(
                f"decoder_channels needs {n_up} entries for patch {self.patch}, "
                f"got {len(self.decoder_channels)}"
            )

    @property
    def skip_blocks(self) -> tuple[int, ...]:
        """1-based encoder block indices feeding the decoder, k*n/4 rule."""
        return tuple(math.ceil(self.n_blocks * k / 4) for k in (1, 2, 3, 4))

    @staticmethod
    def paper_scale() -> "UNETRConfig":
        return UNETRConfig(patch=16, embed_dim=768, n_heads=12, n_blocks=12,
                           mlp_dim=3072, decoder_channels=(128, 64, 32, 16),
                           in_channels=16)


@dataclass(frozen=True)
class UNet3DConfig:
    patch: int = 8
    in_channels: int = 16
    base_channels: int = 24

    def __post_init__(self):
        if self.patch < 4 or (self.patch & (self.patch - 1)) != 0:
            raise ValueError(f"patch must be a power of two >= 4, got {self.patch}")
        if self.in_channels < 1 or self.base_channels < 1:
            raise ValueError("in_channels and base_channels must be >= 1")


@dataclass
class GeneratorState:
    """A generator's configuration, parameters theta, and frozen noise."""

    config: UNETRConfig | UNet3DConfig
    grid: VolumeGrid
    params: ParamStore
    noise: np.ndarray = field(repr=False)
    seed: int
    arch: str = "unetr"

    def clone(self) -> "GeneratorState":
        fresh = init_generator(self.config, self.grid, self.seed) \
            if self.arch == "unetr" else init_unet3d(self.config, self.grid, self.seed)
        fresh.params.load_state_dict(self.params.state_dict())
        fresh.noise = self.noise.copy()
        return fresh


def sample_noise(grid: VolumeGrid, channels: int, seed: int) -> np.ndarray:
    """I.i.d. standard-normal noise volumes, deterministic per seed."""
    if channels < 1:
        raise ValueError(f"channels must be >= 1, got {channels}")
    rng = np.random.default_rng(seed)
    return rng.standard_normal((channels,) + grid.shape, dtype=np.float32)


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    std = math.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, std, size=shape).astype(np.float32)


def _add_linear(ps, rng, name, n_in, n_out, bias=True):
    ps.add(f"{name}.w", _glorot(rng, (n_in, n_out), n_in, n_out))
    if bias:
        ps.add(f"{name}.b", np.zeros(n_out, dtype=np.float32))


def _add_conv3(ps, rng, name, cin, cout, k):
    kvol = int(np.prod(k))
    ps.add(f"{name}.w", _glorot(rng, (cout, cin) + tuple(k), cin * kvol, cout * kvol))
    ps.add(f"{name}.b", np.zeros(cout, dtype=np.float32))


def _add_tconv(ps, rng, name, cin, cout):
    ps.add(f"{name}.w", _glorot(rng, (cin, cout, 2, 2, 2), cin * 8, cout * 8))
    ps.add(f"{name}.b", np.zeros(cout, dtype=np.float32))


def _add_norm(ps, name, c):
    ps.add(f"{name}.g", np.ones(c, dtype=np.float32))
    ps.add(f"{name}.b", np.zeros(c, dtype=np.float32))


def _token_grid(config: UNETRConfig, grid: VolumeGrid) -> tuple[int, int, int]:
    p = config.patch
    if grid.nx % p or grid.ny % p or grid.nz % p:
        raise ValueError(f"patch {p} does not divide grid {grid.shape}")
    return (grid.nx // p, grid.ny // p, grid.nz // p)


def init_generator(config: UNETRConfig, grid: VolumeGrid, seed: int) -> GeneratorState:
    """Glorot-normal weights, zero biases, unit norm scales; seeded."""
    nd, nh, nw = _token_grid(config, grid)
    n_tokens = nd * nh * nw
    e = config.embed_dim
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    ps = ParamStore()

    _add_linear(ps, rng, "patch_embed", config.in_channels * config.patch ** 3, e)
    ps.add("pos_embed", _glorot(rng, (n_tokens, e), n_tokens, e))
    for i in range(config.n_blocks):
        _add_norm(ps, f"block{i}.ln1", e)
        _add_linear(ps, rng, f"block{i}.attn.q", e, e, bias=False)
        _add_linear(ps, rng, f"block{i}.attn.k", e, e, bias=False)
        _add_linear(ps, rng, f"block{i}.attn.v", e, e, bias=False)
        _add_linear(ps, rng, f"block{i}.attn.out", e, e)
        _add_norm(ps, f"block{i}.ln2", e)
        _add_linear(ps, rng, f"block{i}.mlp.fc1", e, config.mlp_dim)
        _add_linear(ps, rng, f"block{i}.mlp.fc2", config.mlp_dim, e)

    prev = e
    for s, ch in enumerate(config.decoder_channels, start=1):
        _add_tconv(ps, rng, f"dec{s}.up", prev, ch)
        if s <= 3:
            _add_tconv(ps, rng, f"dec{s}.skip0", e, ch)
            for j in range(1, s):
                _add_tconv(ps, rng, f"dec{s}.skip{j}", ch, ch)
            cin = 2 * ch
        else:
            cin = ch
        _add_conv3(ps, rng, f"dec{s}.conv1", cin, ch, (3, 3, 3))
        _add_norm(ps, f"dec{s}.bn1", ch)
        _add_conv3(ps, rng, f"dec{s}.conv2", ch, ch, (3, 3, 3))
        _add_norm(ps, f"dec{s}.bn2", ch)
        prev = ch
    _add_conv3(ps, rng, "head", prev, 1, (1, 1, 1))

    noise = sample_noise(grid, config.in_channels, seed)
    return GeneratorState(config=config, grid=grid, params=ps, noise=noise,
                          seed=seed, arch="unetr")


def _tokens_to_grid(tokens: Tensor, shape3: tuple[int, int, int]) -> Tensor:
    nd, nh, nw = shape3
    e = tokens.shape[1]
    return transpose(reshape(tokens, (nd, nh, nw, e)), (3, 0, 1, 2))


def _conv_block(ps: ParamStore, name: str, x: Tensor) -> Tensor:
    x = conv3d(x, ps[f"{name}.conv1.w"], ps[f"{name}.conv1.b"], pad=(1, 1, 1))
    x = relu(batch_norm(x, ps[f"{name}.bn1.g"], ps[f"{name}.bn1.b"]))
    x = conv3d(x, ps[f"{name}.conv2.w"], ps[f"{name}.conv2.b"], pad=(1, 1, 1))
    x = relu(batch_norm(x, ps[f"{name}.bn2.g"], ps[f"{name}.bn2.b"]))
    return x


def generate_tensor(state: GeneratorState, attn_sink: list | None = None) -> Tensor:
    """Differentiable forward pass: noise -> (N1, N2, N3) tensor."""
    if state.arch == "unet3d":
        return _unet3d_tensor(state)
    cfg: UNETRConfig = state.config
    ps = state.params
    tg = _token_grid(cfg, state.grid)

    x = Tensor(state.noise)
    tokens = patchify_3d(x, cfg.patch)
    h = add(linear(tokens, ps["patch_embed.w"], ps["patch_embed.b"]), ps["pos_embed"])

    taps: list[Tensor] = []
    for i in range(cfg.n_blocks):
        pre = f"block{i}"
        n1 = layer_norm(h, ps[f"{pre}.ln1.g"], ps[f"{pre}.ln1.b"])
        q = matmul(n1, ps[f"{pre}.attn.q.w"])
        k = matmul(n1, ps[f"{pre}.attn.k.w"])
        v = matmul(n1, ps[f"{pre}.attn.v.w"])
        att = scaled_dot_product_attention(q, k, v, cfg.n_heads, attn_sink)
        h = add(h, linear(att, ps[f"{pre}.attn.out.w"], ps[f"{pre}.attn.out.b"]))
        n2 = layer_norm(h, ps[f"{pre}.ln2.g"], ps[f"{pre}.ln2.b"])
        m = relu(linear(n2, ps[f"{pre}.mlp.fc1.w"], ps[f"{pre}.mlp.fc1.b"]))
        m = linear(m, ps[f"{pre}.mlp.fc2.w"], ps[f"{pre}.mlp.fc2.b"])
        h = add(h, m)
        taps.append(h)

    z = [taps[i - 1] for i in cfg.skip_blocks]  # z[0]..z[3], z[3] deepest
    d = _tokens_to_grid(z[3], tg)
    for s, ch in enumerate(cfg.decoder_channels, start=1):
        d = transposed_conv3d(d, ps[f"dec{s}.up.w"], ps[f"dec{s}.up.b"])
        if s <= 3:
            sk = _tokens_to_grid(z[3 - s], tg)
            for j in range(s):
                sk = transposed_conv3d(sk, ps[f"dec{s}.skip{j}.w"], ps[f"dec{s}.skip{j}.b"])
            d = concat([d, sk], axis=0)
        d = _conv_block(ps, f"dec{s}", d)
    out = conv3d(d, ps["head.w"], ps["head.b"])
    return reshape(out, state.grid.shape)


def generate(state: GeneratorState) -> Volume:
    """Run the generator; deterministic for a fixed state."""
    return Volume(state.grid, generate_tensor(state).data)


# ---------------------------------------------------------------------------
# patch-based 3D U-Net baseline
# ---------------------------------------------------------------------------

def init_unet3d(config: UNet3DConfig, grid: VolumeGrid, seed: int) -> GeneratorState:
    p = config.patch
    if grid.nx % p or grid.ny % p or grid.nz % p:
        raise ValueError(f"patch {p} does not divide grid {grid.shape}")
    b = config.base_channels
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    ps = ParamStore()

    _add_conv3(ps, rng, "enc1.conv1", config.in_channels, b, (3, 3, 3))
    _add_norm(ps, "enc1.bn1", b)
    _add_conv3(ps, rng, "enc1.conv2", b, b, (3, 3, 3))
    _add_norm(ps, "enc1.bn2", b)
    _add_conv3(ps, rng, "enc2.conv1", b, 2 * b, (3, 3, 3))
    _add_norm(ps, "enc2.bn1", 2 * b)
    _add_conv3(ps, rng, "enc2.conv2", 2 * b, 2 * b, (3, 3, 3))
    _add_norm(ps, "enc2.bn2", 2 * b)
    _add_conv3(ps, rng, "bott.conv1", 2 * b, 4 * b, (3, 3, 3))
    _add_norm(ps, "bott.bn1", 4 * b)
    _add_conv3(ps, rng, "bott.conv2", 4 * b, 4 * b, (3, 3, 3))
    _add_norm(ps, "bott.bn2", 4 * b)
    _add_tconv(ps, rng, "up1", 4 * b, 2 * b)
    _add_conv3(ps, rng, "dec1.conv1", 4 * b, 2 * b, (3, 3, 3))
    _add_norm(ps, "dec1.bn1", 2 * b)
    _add_conv3(ps, rng, "dec1.conv2", 2 * b, 2 * b, (3, 3, 3))
    _add_norm(ps, "dec1.bn2", 2 * b)
    _add_tconv(ps, rng, "up2", 2 * b, b)
    _add_conv3(ps, rng, "dec2.conv1", 2 * b, b, (3, 3, 3))
    _add_norm(ps, "dec2.bn1", b)
    _add_conv3(ps, rng, "dec2.conv2", b, b, (3, 3, 3))
    _add_norm(ps, "dec2.bn2", b)
    _add_conv3(ps, rng, "head", b, 1, (1, 1, 1))

    noise = sample_noise(grid, config.in_channels, seed)
    return GeneratorState(config=config, grid=grid, params=ps, noise=noise,
                          seed=seed, arch="unet3d")


def _unet_block(ps, name, x):
    x = conv3d(x, ps[f"{name}.conv1.w"], ps[f"{name}.conv1.b"], pad=(1, 1, 1))
    x = relu(batch_norm(x, ps[f"{name}.bn1.g"], ps[f"{name}.bn1.b"]))
    x = conv3d(x, ps[f"{name}.conv2.w"], ps[f"{name}.conv2.b"], pad=(1, 1, 1))
    x = relu(batch_norm(x, ps[f"{name}.bn2.g"], ps[f"{name}.bn2.b"]))
    return x


def _unet3d_patch(ps: ParamStore, x: Tensor) -> Tensor:
    e1 = _unet_block(ps, "enc1", x)
    e2 = _unet_block(ps, "enc2", avg_pool3d(e1))
    bt = _unet_block(ps, "bott", avg_pool3d(e2))
    d1 = transposed_conv3d(bt, ps["up1.w"], ps["up1.b"])
    d1 = _unet_block(ps, "dec1", concat([d1, e2], axis=0))
    d2 = transposed_conv3d(d1, ps["up2.w"], ps["up2.b"])
    d2 = _unet_block(ps, "dec2", concat([d2, e1], axis=0))
    return conv3d(d2, ps["head.w"], ps["head.b"])


def _unet3d_tensor(state: GeneratorState) -> Tensor:
    cfg: UNet3DConfig = state.config
    ps = state.params
    p = cfg.patch
    nx, ny, nz = state.grid.shape
    nd, nh, nw = nx // p, ny // p, nz // p
    noise = Tensor(state.noise)
    d_rows = []
    for di in range(nd):
        h_rows = []
        for hi in range(nh):
            w_cells = []
            for wi in range(nw):
                sl = noise.data[:, di * p:(di + 1) * p, hi * p:(hi + 1) * p,
                                wi * p:(wi + 1) * p]
                w_cells.append(_unet3d_patch(ps, Tensor(sl)))
            h_rows.append(concat(w_cells, axis=3))
        d_rows.append(concat(h_rows, axis=2))
    out = concat(d_rows, axis=1)
    return reshape(out, state.grid.shape)


def generate_unet3d(state: GeneratorState) -> Volume:
    """Patch-based 3D U-Net forward, patches reassembled to the full grid."""
    if state.arch != "unet3d":
        raise ValueError(f"expected a unet3d state, got {state.arch!r}")
    return Volume(state.grid, _unet3d_tensor(state).data)
