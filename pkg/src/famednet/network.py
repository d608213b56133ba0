"""Network builders, forward/backward execution and complexity accounting.

One K-encoder per scale: five densely connected point-wise blocks, the
first four followed by BN, ReLU and stride-1 pooling of growing size, the
fifth producing the 3-channel K map.  Multi-scale variants run independent
encoders on bilinearly downsampled copies of the input and fuse the
upsampled K maps with a 1x1 conv + ReLU.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from . import haze
from .guided import GuidedFilterParams, fast_guided_filter
from .tensor import (
    DTYPE,
    BatchNorm,
    BatchNormState,
    Conv3x3,
    DenseConv1x1,
    Pool,
    ReLU,
    bilinear_resize,
    bilinear_resize_backward,
)

# Dense-connection index sets for blocks 1..5; feature 0 is the encoder input.
DENSE_INPUTS = ((0,), (1,), (1, 2), (2, 3), (1, 2, 3, 4))
POOL_SIZES = (1, 3, 5, 7)
VARIANTS = ("ss", "gp", "lp")
FIXED_TEST_SIZE = 360


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    variant: str = "gp"
    scales: int = 3
    feature_dim: int = 32
    use_bn: bool = True
    pool_mode: str = "avg"
    front_conv3x3_channels: int = 0
    pool_sizes: tuple = POOL_SIZES

    def __post_init__(self):
        object.__setattr__(self, "variant", self.variant.lower())
        object.__setattr__(self, "pool_sizes", tuple(int(r) for r in self.pool_sizes))
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.variant == "ss" and self.scales != 1:
            raise ConfigError("variant 'ss' is single-scale; scales must be 1")
        if self.variant != "ss" and not 2 <= self.scales <= 3:
            raise ConfigError(f"variant {self.variant!r} needs 2 or 3 scales, got {self.scales}")
        if self.feature_dim < 3:
            raise ConfigError(f"feature_dim must be >= 3, got {self.feature_dim}")
        if self.pool_mode not in ("avg", "max"):
            raise ConfigError(f"pool_mode must be 'avg' or 'max', got {self.pool_mode!r}")
        if self.front_conv3x3_channels < 0:
            raise ConfigError("front_conv3x3_channels must be >= 0")
        if len(self.pool_sizes) != 4 or any(r < 1 or r % 2 == 0 for r in self.pool_sizes):
            raise ConfigError(f"pool_sizes must be four positive odd ints, got {self.pool_sizes}")

    @classmethod
    def single_scale(cls, **kw) -> "NetConfig":
        return cls(variant="ss", scales=1, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pool_sizes"] = list(self.pool_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**d)


def encoder_channels(config: NetConfig) -> list[tuple[int, int]]:
    """(in, out) channel counts of the five point-wise convs in one encoder."""
    f = config.feature_dim
    c0 = config.front_conv3x3_channels or 3
    widths = [c0, f, f, f, f]
    out = []
    for l, inputs in enumerate(DENSE_INPUTS):
        ci = sum(widths[k] for k in inputs)
        out.append((ci, 3 if l == 4 else f))
    return out


def count_parameters(config: NetConfig) -> int:
    """Closed-form learnable-parameter count (running BN statistics excluded)."""
    per_scale = sum(ci * co + co for ci, co in encoder_channels(config))
    if config.use_bn:
        per_scale += 2 * config.feature_dim * 4
    if config.front_conv3x3_channels:
        c = config.front_conv3x3_channels
        per_scale += 3 * 9 * c + c
    total = per_scale * config.scales
    if config.scales > 1:
        total += 3 * config.scales * 3 + 3
    return total


class WeightStore(OrderedDict):
    """Ordered ``name -> Param`` mapping; running statistics are non-learnable entries."""

    initialized: bool = True

    def learnable(self):
        return [(k, p) for k, p in self.items() if p.learnable]

    def num_learnable(self) -> int:
        return sum(p.size for _, p in self.learnable())

    def zero_grad(self):
        for p in self.values():
            p.zero_grad()


# ---------------------------------------------------------------- blocks


class Block:
    def __init__(self, conv, bn=None, relu=True, pool=None):
        self.conv = conv
        self.bn = bn
        self.relu = ReLU() if relu else None
        self.pool = pool

    def layers(self):
        return [l for l in (self.conv, self.bn, self.relu, self.pool) if l is not None]

    def forward(self, x, training, keep_cache=True):
        for layer in self.layers():
            x = layer.forward(x, training)
            if not keep_cache:
                layer.release()
        return x

    def backward(self, d):
        for layer in reversed(self.layers()):
            d = layer.backward(d)
        return d


class Encoder:
    def __init__(self, blocks: list[Block], front: Block | None = None):
        self.blocks = blocks
        self.front = front

    def forward(self, x, training, keep_cache=True):
        f0 = self.front.forward(x, training, keep_cache) if self.front else x
        feats = [f0]
        for l, block in enumerate(self.blocks):
            feats.append(block.forward([feats[k] for k in DENSE_INPUTS[l]], training, keep_cache))
            if not keep_cache:
                # drop features no later block reads
                for k in range(l + 1):
                    if all(k not in DENSE_INPUTS[j] for j in range(l + 1, len(self.blocks))):
                        feats[k] = None
        return feats[-1]

    def backward(self, dK):
        grads = [None] * (len(self.blocks) + 1)
        grads[-1] = dK
        for l in reversed(range(len(self.blocks))):
            dinp = self.blocks[l].backward(grads[l + 1])
            for k, part in zip(DENSE_INPUTS[l], dinp):
                grads[k] = part if grads[k] is None else grads[k] + part
        if self.front is not None:
            self.front.backward(grads[0])


def _he_normal(rng, fan_in, shape, dtype):
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


def scale_size(h: int, w: int, s: int) -> tuple[int, int]:
    f = 2**s
    return max(1, int(math.floor(h / f + 0.5))), max(1, int(math.floor(w / f + 0.5)))


@dataclass
class NetOutputs:
    K: list
    J: list
    K_fusion: np.ndarray
    J_fusion: np.ndarray
    inputs: list = field(repr=False, default_factory=list)


class FamedNet:
    """A built network: per-scale encoders, optional fusion head, and its WeightStore."""

    def __init__(self, config: NetConfig, encoders: list[Encoder], fusion: Block | None,
                 weights: WeightStore, dtype):
        self.config = config
        self.encoders = encoders
        self.fusion = fusion
        self.weights = weights
        self.dtype = dtype
        self._cache = None

    # -------------------------------------------------------------- forward

    def forward(self, I: np.ndarray, mode: str = "eval", keep_cache: bool = True) -> NetOutputs:
        """Run all scales; ``keep_cache=False`` frees layer caches as it goes (no backward possible)."""
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        if I.ndim == 3:
            I = I[None]
        if I.ndim != 4 or I.shape[1] != 3:
            raise ValueError(f"expected a 3-channel (n, 3, h, w) input, got shape {I.shape}")
        training = mode == "train"
        I = I.astype(self.dtype, copy=False)
        n, _, h, w = I.shape
        S = self.config.scales
        inputs = [I] + [bilinear_resize(I, *scale_size(h, w, s)) for s in range(1, S)]

        raw = [self.encoders[s].forward(inputs[s], training, keep_cache) for s in range(S)]
        if self.config.variant == "lp":
            K = [None] * S
            K[S - 1] = raw[S - 1]
            for s in reversed(range(S - 1)):
                K[s] = bilinear_resize(K[s + 1], *inputs[s].shape[2:]) + raw[s]
        else:
            K = raw
        J = [haze.recover_radiance(inputs[s], K[s], clamp=False) for s in range(S)]

        if self.fusion is None:
            K_fusion, J_fusion = K[0], J[0]
        else:
            ups = [K[0]] + [bilinear_resize(K[s], h, w) for s in range(1, S)]
            K_fusion = self.fusion.forward(ups, training, keep_cache)
            J_fusion = haze.recover_radiance(I, K_fusion, clamp=False)
        return NetOutputs(K=K, J=J, K_fusion=K_fusion, J_fusion=J_fusion, inputs=inputs)

    __call__ = forward

    # -------------------------------------------------------------- backward

    def backward(self, out: NetOutputs, dJ: list, dJ_fusion: np.ndarray | None):
        """Accumulate parameter gradients given dLoss/dJ_s and dLoss/dJ_fusion."""
        S = self.config.scales
        inputs = out.inputs
        dK = [None] * S
        for s in range(S):
            if dJ[s] is not None:
                dK[s] = dJ[s] * (inputs[s] - 1)
        if dJ_fusion is not None:
            dKf = dJ_fusion * (inputs[0] - 1)
            if self.fusion is None:
                dK[0] = dKf if dK[0] is None else dK[0] + dKf
            else:
                dconcat = self.fusion.backward(dKf)
                for s, part in enumerate(dconcat):
                    if s > 0:
                        part = bilinear_resize_backward(part, *inputs[s].shape[2:])
                    dK[s] = part if dK[s] is None else dK[s] + part
        dK = [np.zeros_like(out.K[s]) if d is None else d for s, d in enumerate(dK)]
        if self.config.variant == "lp":
            for s in range(S - 1):
                up = bilinear_resize_backward(dK[s], *inputs[s + 1].shape[2:])
                dK[s + 1] = dK[s + 1] + up
        for s in range(S):
            self.encoders[s].backward(dK[s])

    # -------------------------------------------------------------- utilities

    def num_parameters(self) -> int:
        return self.weights.num_learnable()

    def zero_grad(self):
        self.weights.zero_grad()


def build_network(config: NetConfig, seed: int = 0, dtype=DTYPE, initialize: bool = True) -> FamedNet:
    """Construct the network and its WeightStore.

    Conv weights are drawn from N(0, 2/fan_in), biases start at 0, BN at
    gamma=1 / beta=0 with running statistics (0, 1).
    """
    rng = np.random.default_rng(seed)
    store = WeightStore()
    encoders = []

    def conv(name, co, ci, k=1):
        shape = (co, ci) if k == 1 else (co, ci, k, k)
        w = _he_normal(rng, ci * k * k, shape, dtype)
        layer = (DenseConv1x1 if k == 1 else Conv3x3)(w, np.zeros(co, dtype))
        store[f"{name}.weight"] = layer.weight
        store[f"{name}.bias"] = layer.bias
        return layer

    def bn(name, c):
        layer = BatchNorm(BatchNormState.fresh(c, dtype))
        for key, p in layer.params().items():
            store[f"{name}.{key}"] = p
        return layer

    chans = encoder_channels(config)
    for s in range(config.scales):
        front = None
        if config.front_conv3x3_channels:
            front = Block(conv(f"s{s}.front", config.front_conv3x3_channels, 3, k=3))
        blocks = []
        for l, (ci, co) in enumerate(chans):
            name = f"s{s}.block{l + 1}"
            c = conv(f"{name}.conv", co, ci)
            if l < 4:
                b = bn(f"{name}.bn", co) if config.use_bn else None
                r = config.pool_sizes[l]
                p = Pool(r, config.pool_mode) if r > 1 else None
                blocks.append(Block(c, b, relu=True, pool=p))
            else:
                # Residual heads of the Laplacian variant must be able to go negative.
                residual = config.variant == "lp" and s < config.scales - 1
                blocks.append(Block(c, relu=not residual))
        encoders.append(Encoder(blocks, front))

    fusion = None
    if config.scales > 1:
        fusion = Block(conv("fusion", 3, 3 * config.scales), relu=True)
    store.initialized = initialize
    return FamedNet(config, encoders, fusion, store, dtype)


# ---------------------------------------------------------------- accounting


def receptive_field(net_or_config) -> int:
    """Input extent (in full-resolution pixels) seen by one output K value."""
    cfg = net_or_config.config if isinstance(net_or_config, FamedNet) else net_or_config
    rf = [3 if cfg.front_conv3x3_channels else 1]
    for l, inputs in enumerate(DENSE_INPUTS):
        r = cfg.pool_sizes[l] if l < 4 else 1
        rf.append(max(rf[k] for k in inputs) + r - 1)
    return max(rf[-1] * 2**s for s in range(cfg.scales))


@dataclass
class FlopReport:
    conv_macs: int
    bias_adds: int
    bn_ops: int
    relu_ops: int
    pool_ops: int
    resize_ops: int
    layers: list = field(default_factory=list)

    @property
    def total(self) -> int:
        """Multiply-adds of the deployed net: conv MACs plus bias adds (BN folds into the convs)."""
        return self.conv_macs + self.bias_adds

    @property
    def all_ops(self) -> int:
        return self.total


def count_flops(net_or_config, h: int, w: int) -> FlopReport:
    cfg = net_or_config.config if isinstance(net_or_config, FamedNet) else net_or_config
    layers = []
    totals = dict(conv_macs=0, bias_adds=0, bn_ops=0, relu_ops=0, pool_ops=0, resize_ops=0)

    def add(name, kind, **ops):
        layers.append({"name": name, "kind": kind, **ops})
        for k, v in ops.items():
            totals[k] += v

    chans = encoder_channels(cfg)
    for s in range(cfg.scales):
        hs, ws = scale_size(h, w, s)
        px = hs * ws
        if s > 0:
            add(f"s{s}.downsample", "resize", resize_ops=4 * 3 * px)
        if cfg.front_conv3x3_channels:
            c = cfg.front_conv3x3_channels
            add(f"s{s}.front", "conv3x3", conv_macs=px * 27 * c, bias_adds=px * c, relu_ops=px * c)
        for l, (ci, co) in enumerate(chans):
            name = f"s{s}.block{l + 1}"
            add(f"{name}.conv", "conv1x1", conv_macs=px * ci * co, bias_adds=px * co, relu_ops=px * co)
            if l < 4:
                if cfg.use_bn:
                    add(f"{name}.bn", "bn", bn_ops=px * co)
                r = cfg.pool_sizes[l]
                if r > 1:
                    add(f"{name}.pool", "pool", pool_ops=px * co * 2 * r)
    if cfg.scales > 1:
        px = h * w
        add("upsample", "resize", resize_ops=4 * 3 * px * (cfg.scales - 1))
        ci = 3 * cfg.scales
        add("fusion", "conv1x1", conv_macs=px * ci * 3, bias_adds=px * 3, relu_ops=px * 3)
    return FlopReport(layers=layers, **totals)


# ---------------------------------------------------------------- inference


def fixed_size(h: int, w: int, longest: int = FIXED_TEST_SIZE) -> tuple[int, int]:
    if max(h, w) == longest:
        return h, w
    s = longest / max(h, w)
    return max(1, int(math.floor(h * s + 0.5))), max(1, int(math.floor(w * s + 0.5)))


def predict_k(net: FamedNet, I: np.ndarray, longest: int | None = FIXED_TEST_SIZE) -> np.ndarray:
    """K_fusion for a (3, h, w) image, predicted at the fixed test size and resized back."""
    h, w = I.shape[-2:]
    size = fixed_size(h, w, longest) if longest else (h, w)
    x = bilinear_resize(I.astype(net.dtype), *size)
    K = net.forward(x[None], mode="eval", keep_cache=False).K_fusion[0]
    return bilinear_resize(K, h, w)


def dehaze_image(
    net: FamedNet,
    I: np.ndarray,
    gf: GuidedFilterParams | None = GuidedFilterParams(),
    longest: int | None = FIXED_TEST_SIZE,
) -> np.ndarray:
    """Fixed-size inference: resize, predict K, upsample, refine with the fast guided filter, recover.

    ``gf=None`` skips refinement; ``longest=None`` runs at native resolution.
    """
    if not getattr(net.weights, "initialized", True):
        raise RuntimeError("network weights are not loaded")
    if I.ndim != 3 or I.shape[0] != 3:
        raise ValueError(f"expected a (3, h, w) image, got {I.shape}")
    K = predict_k(net, I, longest).astype(np.float64)
    if gf is not None:
        guide = haze.grayscale(I.astype(np.float64))
        K = np.stack([fast_guided_filter(guide, K[c], gf.radius, gf.eps, gf.downsample) for c in range(3)])
    return haze.recover_radiance(I.astype(np.float64), K, clamp=True)
