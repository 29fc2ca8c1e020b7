"""Composable networks: bottleneck blocks with pluggable cores, a ResNet
builder (resnet50 preset), and an upsampling generator with skip modulation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor
from .attention import (MHSA, MHSAConfig, SASERecogConfig, SASERecognition,
                        SASESynthConfig, SASESynthesis, SEConfig, SLEConfig,
                        SkipLayerExcite, SqueezeExcite)
from .nn import (BatchNorm2d, Conv2d, ConvTranspose2d, GLU, Linear, MaxPool2d,
                 Module, NoiseInjection, UpsampleNearest, _prod, avg_pool2d,
                 global_avg_pool)

BLOCK_VARIANTS = ("vanilla", "se", "mhsa", "sase")


@dataclass
class BlockSpec:
    variant: str
    in_channels: int
    channels: int                 # block output width
    bottleneck_ratio: int = 4     # inner width = channels / ratio, exactly
    stride: int = 1
    heads: int = 4
    se_reduction: int = 16
    key_squeeze: int = 4
    query_reduction: int = 4
    padding_mode: str = "zeros"

    def __post_init__(self):
        if self.variant not in BLOCK_VARIANTS:
            raise ValueError(f"unknown block variant {self.variant!r}")
        if self.channels % self.bottleneck_ratio:
            raise ShapeError(f"channels {self.channels} must divide ratio {self.bottleneck_ratio}")

    @property
    def inner(self) -> int:
        return self.channels // self.bottleneck_ratio


@dataclass
class NetSpec:
    kind: str = "resnet"
    # resnet fields
    stage_depths: tuple[int, ...] = (3, 4, 6, 3)
    stem_channels: int = 64
    num_classes: int = 1000
    variant: str = "vanilla"
    mhsa_stages: tuple[int, ...] = (3,)   # mhsa variant applies here, vanilla elsewhere
    # generator fields
    latent_dim: int = 256
    target_resolution: int = 256
    base_width: int = 512
    min_width: int = 16
    skip_kind: str = "sase"               # or "sle"
    skip_pairs: tuple[tuple[int, int], ...] | None = None   # None = fastgan-style default
    block_noise_std: float = 0.0
    mask_noise_std: float | None = None   # None = 1.0 at >=1024, else 0.0

    def stage_resolutions(self) -> list[int]:
        res, out = 4, [4]
        while res < self.target_resolution:
            res *= 2
            out.append(res)
        if out[-1] != self.target_resolution:
            raise ShapeError(f"target resolution {self.target_resolution} must be a power-of-two multiple of 4")
        return out

    def width(self, resolution: int) -> int:
        i = int(np.log2(resolution // 4))
        return max(self.min_width, self.base_width >> i)

    def default_skip_pairs(self) -> tuple[tuple[int, int], ...]:
        pairs = [(8, 128), (16, 256), (32, 512)]
        return tuple((s, t) for s, t in pairs if t <= self.target_resolution)

    def resolved_skip_pairs(self) -> tuple[tuple[int, int], ...]:
        pairs = self.skip_pairs if self.skip_pairs is not None else self.default_skip_pairs()
        for s, t in pairs:
            if s >= t:
                raise ShapeError(f"skip source {s} must be lower resolution than target {t}")
        return tuple(pairs)

    def resolved_mask_noise(self) -> float:
        if self.mask_noise_std is not None:
            return self.mask_noise_std
        return 1.0 if self.target_resolution >= 1024 else 0.0


# dilation of the spatial mask branch by source stage resolution
MASK_DILATION = {8: 2, 16: 2, 32: 4}


# ---------------------------------------------------------------------------
# bottleneck block
# ---------------------------------------------------------------------------

class Bottleneck(Module):
    """1x1 reduce -> variant core -> 1x1 expand, with residual shortcut."""

    def __init__(self, spec: BlockSpec, rng=None, dtype=np.float64):
        super().__init__()
        self.spec = spec
        rng = rng if rng is not None else np.random.default_rng(0)
        c, C = spec.inner, spec.channels
        self.conv1 = self.child("conv1", Conv2d(spec.in_channels, c, 1, bias=False, rng=rng, dtype=dtype))
        self.bn1 = self.child("bn1", BatchNorm2d(c, dtype=dtype))
        if spec.variant in ("vanilla", "se"):
            self.core = self.child("core", Conv2d(c, c, 3, stride=spec.stride, padding=1,
                                                  bias=False, padding_mode=spec.padding_mode,
                                                  rng=rng, dtype=dtype))
        elif spec.variant == "sase":
            cfg = SASERecogConfig(channels=c, heads=spec.heads, key_squeeze=spec.key_squeeze,
                                  query_reduction=spec.query_reduction, stride=spec.stride,
                                  padding_mode=spec.padding_mode)
            self.core = self.child("core", SASERecognition(cfg, rng=rng, dtype=dtype))
        else:  # mhsa
            self.core = self.child("core", MHSA(MHSAConfig(channels=c, heads=spec.heads),
                                                rng=rng, dtype=dtype))
        self.bn2 = self.child("bn2", BatchNorm2d(c, dtype=dtype))
        self.conv3 = self.child("conv3", Conv2d(c, C, 1, bias=False, rng=rng, dtype=dtype))
        self.bn3 = self.child("bn3", BatchNorm2d(C, dtype=dtype))
        if spec.variant == "se":
            self.se = self.child("se", SqueezeExcite(SEConfig(C, spec.se_reduction), rng=rng, dtype=dtype))
        self.needs_proj = spec.stride != 1 or spec.in_channels != C
        if self.needs_proj:
            self.proj = self.child("proj", Conv2d(spec.in_channels, C, 1, stride=spec.stride,
                                                  bias=False, rng=rng, dtype=dtype))
            self.proj_bn = self.child("proj_bn", BatchNorm2d(C, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        spec = self.spec
        h = T.relu(self.bn1(self.conv1(x)))
        h = self.core(h)
        if spec.variant == "mhsa" and spec.stride == 2:
            h = avg_pool2d(h, 2, 2)
        h = T.relu(self.bn2(h))
        h = self.bn3(self.conv3(h))
        if spec.variant == "se":
            h = self.se(h)
        sc = self.proj_bn(self.proj(x)) if self.needs_proj else x
        return T.relu(T.add(h, sc))

    def out_shape(self, in_shape):
        C, H, W = in_shape
        s = self.spec.stride
        return (self.spec.channels, H // s, W // s)

    def cost(self, in_shape):
        spec = self.spec
        entries, s = self.child_cost("conv1", in_shape)
        sub, s = self.child_cost("bn1", s)
        entries += sub
        entries.append(("act1", 0, _prod(s), s))
        sub, s = self.child_cost("core", s)
        entries += sub
        if spec.variant == "mhsa" and spec.stride == 2:
            s = (s[0], s[1] // 2, s[2] // 2)
            entries.append(("core_pool", 0, _prod(s), s))
        sub, s = self.child_cost("bn2", s)
        entries += sub
        entries.append(("act2", 0, _prod(s), s))
        sub, s = self.child_cost("conv3", s)
        entries += sub
        sub, s = self.child_cost("bn3", s)
        entries += sub
        if spec.variant == "se":
            sub, s = self.child_cost("se", s)
            entries += sub
        if self.needs_proj:
            sub, _ = self.child_cost("proj", in_shape)
            entries += sub
            sub, _ = self.child_cost("proj_bn", s)
            entries += sub
        entries.append(("residual", 0, 2 * _prod(s), s))   # add + final relu
        return entries, s


def build_bottleneck(spec: BlockSpec, seed: int = 0, dtype=np.float64) -> Bottleneck:
    return Bottleneck(spec, rng=np.random.default_rng(seed), dtype=dtype)


# ---------------------------------------------------------------------------
# resnet
# ---------------------------------------------------------------------------

class ResNet(Module):
    def __init__(self, spec: NetSpec, rng=None, dtype=np.float64):
        super().__init__()
        self.spec = spec
        rng = rng if rng is not None else np.random.default_rng(0)
        sc = spec.stem_channels
        self.stem_conv = self.child("stem_conv", Conv2d(3, sc, 7, stride=2, padding=3,
                                                        bias=False, rng=rng, dtype=dtype))
        self.stem_bn = self.child("stem_bn", BatchNorm2d(sc, dtype=dtype))
        self.stem_pool = self.child("stem_pool", MaxPool2d(3, 2, 1))
        self.block_names: list[str] = []
        in_c = sc
        for si, depth in enumerate(spec.stage_depths):
            inner = sc * (2 ** si)
            out_c = inner * 4
            for bi in range(depth):
                variant = spec.variant
                if variant == "mhsa" and si not in spec.mhsa_stages:
                    variant = "vanilla"
                bspec = BlockSpec(variant=variant, in_channels=in_c, channels=out_c,
                                  stride=2 if (bi == 0 and si > 0) else 1)
                name = f"stage{si + 1}.block{bi}"
                self.child(name, Bottleneck(bspec, rng=rng, dtype=dtype))
                self.block_names.append(name)
                in_c = out_c
        self.fc = self.child("fc", Linear(in_c, spec.num_classes, bias=True, rng=rng, dtype=dtype))
        self.feature_channels = in_c

    def forward(self, x: Tensor) -> Tensor:
        batched = x.ndim == 4
        h = T.relu(self.stem_bn(self.stem_conv(x)))
        h = self.stem_pool(h)
        for name in self.block_names:
            h = self._children[name](h)
        h = global_avg_pool(h)
        flat = (h.shape[0], self.feature_channels) if batched else (self.feature_channels,)
        return self.fc(T.reshape(h, flat))

    def cost(self, in_shape):
        C, H, W = in_shape
        if H % 32 or W % 32:
            raise ShapeError("input extents must be divisible by the total stride 32")
        entries, s = self.child_cost("stem_conv", in_shape)
        sub, s = self.child_cost("stem_bn", s)
        entries += sub
        entries.append(("stem_act", 0, _prod(s), s))
        sub, s = self.child_cost("stem_pool", s)
        entries += sub
        for name in self.block_names:
            sub, s = self.child_cost(name, s)
            entries += sub
        entries.append(("head_pool", 0, s[0], (s[0], 1, 1)))
        sub, s = self.child_cost("fc", (s[0],))
        entries += sub
        return entries, s


def resnet50_spec(variant: str = "vanilla", num_classes: int = 1000) -> NetSpec:
    return NetSpec(kind="resnet", stage_depths=(3, 4, 6, 3), num_classes=num_classes,
                   variant=variant)


def build_resnet(spec: NetSpec, seed: int = 0, dtype=np.float64) -> ResNet:
    return ResNet(spec, rng=np.random.default_rng(seed), dtype=dtype)


# ---------------------------------------------------------------------------
# generator
# ---------------------------------------------------------------------------

class UpBlock(Module):
    """upsample x2 -> conv3x3 -> (noise, composite only) -> BN -> GLU."""

    def __init__(self, in_ch, out_ch, composite: bool, noise_std=0.0, noise_seed=0,
                 rng=None, dtype=np.float64):
        super().__init__()
        self.composite = composite
        self.up = self.child("up", UpsampleNearest(2))
        self.conv = self.child("conv", Conv2d(in_ch, 2 * out_ch, 3, padding=1,
                                              bias=False, rng=rng, dtype=dtype))
        if composite:
            self.noise = self.child("noise", NoiseInjection(std=noise_std, seed=noise_seed))
        self.bn = self.child("bn", BatchNorm2d(2 * out_ch, dtype=dtype))
        self.glu = self.child("glu", GLU())

    def forward(self, x):
        h = self.conv(self.up(x))
        if self.composite:
            h = self.noise(h)
        return self.glu(self.bn(h))

    def cost(self, in_shape):
        entries, s = self.child_cost("up", in_shape)
        sub, s = self.child_cost("conv", s)
        entries += sub
        if self.composite:
            sub, s = self.child_cost("noise", s)
            entries += sub
        sub, s = self.child_cost("bn", s)
        entries += sub
        sub, s = self.child_cost("glu", s)
        entries += sub
        return entries, s


class Generator(Module):
    """Latent vector to image: transpose-conv init block, interleaved plain and
    composite upsampling blocks, skip modulation pairs, tanh output head."""

    def __init__(self, spec: NetSpec, rng=None, dtype=np.float64, seed: int = 0):
        super().__init__()
        self.spec = spec
        rng = rng if rng is not None else np.random.default_rng(seed)
        resolutions = spec.stage_resolutions()
        self.resolutions = resolutions
        w4 = spec.width(4)
        self.init_conv = self.child("init_conv", ConvTranspose2d(spec.latent_dim, 2 * w4, 4,
                                                                 bias=False, rng=rng, dtype=dtype))
        self.init_bn = self.child("init_bn", BatchNorm2d(2 * w4, dtype=dtype))
        self.init_glu = self.child("init_glu", GLU())
        prev = w4
        self.stage_names: list[str] = []
        for i, res in enumerate(resolutions[1:]):
            wid = spec.width(res)
            composite = (i % 2 == 0)    # first upsampling block is composite
            name = f"up{res}"
            self.child(name, UpBlock(prev, wid, composite, noise_std=spec.block_noise_std,
                                     noise_seed=seed * 7919 + res, rng=rng, dtype=dtype))
            self.stage_names.append(name)
            prev = wid
        self.skip_names: list[tuple[str, int, int]] = []
        mask_noise = spec.resolved_mask_noise()
        for src, tgt in spec.resolved_skip_pairs():
            name = f"skip{src}_{tgt}"
            cx, cy = spec.width(src), spec.width(tgt)
            if spec.skip_kind == "sle":
                mod = SkipLayerExcite(SLEConfig(cx, cy), rng=rng, dtype=dtype)
            elif spec.skip_kind == "sase":
                cfg = SASESynthConfig(source_channels=cx, target_shape=(cy, tgt, tgt),
                                      dilation=MASK_DILATION.get(src, 1),
                                      noise_std=mask_noise)
                mod = SASESynthesis(cfg, rng=rng, dtype=dtype)
            else:
                raise ValueError(f"unknown skip kind {spec.skip_kind!r}")
            self.child(name, mod)
            self.skip_names.append((name, src, tgt))
        self.out_conv = self.child("out_conv", Conv2d(prev, 3, 3, padding=1,
                                                      bias=True, rng=rng, dtype=dtype))

    def forward(self, z: Tensor, seed: int | None = None) -> Tensor:
        spec = self.spec
        if z.shape[-1] != spec.latent_dim:
            raise ShapeError(f"latent must have {spec.latent_dim} entries, got {z.shape}")
        batched = z.ndim == 2
        lead = (z.shape[0],) if batched else ()
        h = T.reshape(z, lead + (spec.latent_dim, 1, 1))
        h = self.init_glu(self.init_bn(self.init_conv(h)))
        feats = {4: h}
        skips_by_target = {}
        for name, src, tgt in self.skip_names:
            skips_by_target.setdefault(tgt, []).append((name, src))
        for res, name in zip(self.resolutions[1:], self.stage_names):
            h = self._children[name](h)
            for skip_name, src in skips_by_target.get(res, ()):
                mod = self._children[skip_name]
                if isinstance(mod, SASESynthesis):
                    skip_seed = None if mod.cfg.noise_std == 0 else (0 if seed is None else seed) * 104729 + res
                    h = mod(feats[src], h, seed=skip_seed)
                else:
                    h = mod(feats[src], h)
            feats[res] = h
        return T.tanh(self.out_conv(h))

    def mask_arrays(self) -> dict[str, np.ndarray]:
        """Spatial key masks captured by the last forward, one per skip head."""
        out = {}
        for name, _, _ in self.skip_names:
            mod = self._children[name]
            if isinstance(mod, SASESynthesis):
                for i, k in enumerate(mod.last_keys):
                    out[f"{name}.head{i}"] = k
        return out

    def cost(self, in_shape=None):
        spec = self.spec
        entries, s = self.child_cost("init_conv", (spec.latent_dim, 1, 1))
        sub, s = self.child_cost("init_bn", s)
        entries += sub
        sub, s = self.child_cost("init_glu", s)
        entries += sub
        shapes = {4: s}
        skips_by_target = {}
        for name, src, tgt in self.skip_names:
            skips_by_target.setdefault(tgt, []).append((name, src))
        for res, name in zip(self.resolutions[1:], self.stage_names):
            sub, s = self.child_cost(name, s)
            entries += sub
            for skip_name, src in skips_by_target.get(res, ()):
                sub, s = self._children[skip_name].cost((shapes[src], s))
                entries += [(f"{skip_name}.{e[0]}" if e[0] else skip_name,
                             e[1], e[2], e[3]) for e in sub]
            shapes[res] = s
        sub, s = self.child_cost("out_conv", s)
        entries += sub
        entries.append(("out_tanh", 0, _prod(s), s))
        return entries, s


def netspec_to_text(spec: NetSpec) -> str:
    """Serialize a NetSpec to the flat [model] key=value config format."""
    from .config import Config
    cfg = Config()
    put = lambda k, v: cfg.override(f"model.{k}", v)
    put("kind", spec.kind)
    if spec.kind == "resnet":
        put("stage_depths", ",".join(str(d) for d in spec.stage_depths))
        put("stem_channels", spec.stem_channels)
        put("num_classes", spec.num_classes)
        put("variant", spec.variant)
        put("mhsa_stages", ",".join(str(s) for s in spec.mhsa_stages))
    else:
        put("latent_dim", spec.latent_dim)
        put("target_resolution", spec.target_resolution)
        put("base_width", spec.base_width)
        put("min_width", spec.min_width)
        put("skip_kind", spec.skip_kind)
        if spec.skip_pairs is not None:
            put("skip_pairs", ";".join(f"{s}-{t}" for s, t in spec.skip_pairs))
        put("block_noise_std", spec.block_noise_std)
        if spec.mask_noise_std is not None:
            put("mask_noise_std", spec.mask_noise_std)
    return cfg.to_text()


def netspec_from_text(text: str) -> NetSpec:
    from .config import Config
    cfg = Config.parse(text)
    kind = cfg.get_str("model.kind", "resnet")
    if kind == "resnet":
        depths = tuple(int(d) for d in cfg.get_str("model.stage_depths", "3,4,6,3").split(","))
        mh = tuple(int(s) for s in cfg.get_str("model.mhsa_stages", "3").split(","))
        return NetSpec(kind="resnet", stage_depths=depths,
                       stem_channels=cfg.get_int("model.stem_channels", 64),
                       num_classes=cfg.get_int("model.num_classes", 1000),
                       variant=cfg.get_str("model.variant", "vanilla"),
                       mhsa_stages=mh)
    pairs_raw = cfg.get_str("model.skip_pairs")
    pairs = None
    if pairs_raw:
        pairs = tuple(tuple(int(v) for v in p.split("-")) for p in pairs_raw.split(";"))
    return NetSpec(kind="generator",
                   latent_dim=cfg.get_int("model.latent_dim", 256),
                   target_resolution=cfg.get_int("model.target_resolution", 256),
                   base_width=cfg.get_int("model.base_width", 512),
                   min_width=cfg.get_int("model.min_width", 16),
                   skip_kind=cfg.get_str("model.skip_kind", "sase"),
                   skip_pairs=pairs,
                   block_noise_std=cfg.get_float("model.block_noise_std", 0.0),
                   mask_noise_std=cfg.get_float("model.mask_noise_std"))


def generator_spec(target: int = 256, skips: str = "sase", latent_dim: int = 256) -> NetSpec:
    return NetSpec(kind="generator", target_resolution=target, skip_kind=skips,
                   latent_dim=latent_dim)


def build_generator(spec: NetSpec, seed: int = 0, dtype=np.float64) -> Generator:
    return Generator(spec, rng=np.random.default_rng(seed), dtype=dtype, seed=seed)


# ---------------------------------------------------------------------------
# tiny classifier for the training smoke test
# ---------------------------------------------------------------------------

class TinyClassifier(Module):
    """Stem conv + one bottleneck block + pooled linear head; small enough to
    train on a synthetic task in seconds."""

    def __init__(self, variant: str = "sase", in_channels: int = 1, num_classes: int = 4,
                 width: int = 16, seed: int = 0, dtype=np.float64):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.stem_conv = self.child("stem_conv", Conv2d(in_channels, width, 3, padding=1,
                                                        bias=False, rng=rng, dtype=dtype))
        self.stem_bn = self.child("stem_bn", BatchNorm2d(width, dtype=dtype))
        bspec = BlockSpec(variant=variant, in_channels=width, channels=width,
                          bottleneck_ratio=2, heads=2)
        self.block = self.child("block", Bottleneck(bspec, rng=rng, dtype=dtype))
        self.fc = self.child("fc", Linear(width, num_classes, rng=rng, dtype=dtype))
        self.width = width

    def forward(self, x: Tensor) -> Tensor:
        h = T.relu(self.stem_bn(self.stem_conv(x)))
        h = self.block(h)
        h = global_avg_pool(h)
        flat = (h.shape[0], self.width) if h.ndim == 4 else (self.width,)
        return self.fc(T.reshape(h, flat))

    def cost(self, in_shape):
        entries, s = self.child_cost("stem_conv", in_shape)
        sub, s = self.child_cost("stem_bn", s)
        entries += sub
        entries.append(("stem_act", 0, _prod(s), s))
        sub, s = self.child_cost("block", s)
        entries += sub
        entries.append(("head_pool", 0, s[0], (s[0], 1, 1)))
        sub, s = self.child_cost("fc", (s[0],))
        entries += sub
        return entries, s
