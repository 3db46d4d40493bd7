"""Dense-prediction models: a five-stage encoder/decoder segmenter and a
shared-encoder twin-input change detector built from the same blocks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .blocks import Downsample2x, OssBlock, PatchEmbed, SepConv3x3, UpsampleBlock
from .errors import ShapeError
from .nn import Module, uniform_init

NUM_STAGES = 5

TASK_SEGMENTATION = "segmentation"
TASK_CHANGE_DETECTION = "change_detection"


@dataclass
class ModelConfig:
    task: str = TASK_SEGMENTATION
    patch: int = 4
    base_channels: int = 16
    blocks_per_stage: tuple = (1, 1, 2, 1, 1)
    state_dim: int = 8
    mode: str = "ossm"
    num_classes: int = 1
    in_channels: int = 3
    expansion: int = 2
    dw_kernel: int = 3
    shared_direction_params: bool = True
    scan_impl: str = "sequential"
    exact_discretization: bool = True

    def __post_init__(self):
        self.blocks_per_stage = tuple(int(b) for b in self.blocks_per_stage)
        if len(self.blocks_per_stage) != NUM_STAGES:
            raise ValueError(
                f"blocks_per_stage must list {NUM_STAGES} counts, got {self.blocks_per_stage}"
            )
        if self.patch < 1 or self.patch & (self.patch - 1):
            raise ValueError(f"patch must be a power of two, got {self.patch}")
        if self.task not in (TASK_SEGMENTATION, TASK_CHANGE_DETECTION):
            raise ValueError(f"unknown task '{self.task}'")

    @property
    def stage_channels(self):
        return tuple(self.base_channels * (1 << s) for s in range(NUM_STAGES))

    @property
    def divisor(self):
        """Input extents must be multiples of this (patch embed + 4 halvings)."""
        return self.patch * (1 << (NUM_STAGES - 1))


def _check_extents(cfg, h, w):
    d = cfg.divisor
    if h % d or w % d:
        raise ShapeError(
            f"input extents must be multiples of {d} "
            f"(patch {cfg.patch} with {NUM_STAGES - 1} halvings), got {h}x{w}"
        )


def _make_block(cfg, channels, rng, dtype):
    return OssBlock(
        channels, rng, dtype,
        expansion=cfg.expansion, dw_kernel=cfg.dw_kernel, state_dim=cfg.state_dim,
        mode=cfg.mode, shared_direction_params=cfg.shared_direction_params,
        scan_impl=cfg.scan_impl, exact_discretization=cfg.exact_discretization,
    )


class Encoder(Module):
    """Patch embedding plus five block stages with 2x halvings between them."""

    def __init__(self, cfg, rng, dtype):
        cs = cfg.stage_channels
        self.embed = PatchEmbed(cfg.in_channels, cs[0], cfg.patch, rng, dtype)
        self.stages = [
            [_make_block(cfg, cs[s], rng, dtype) for _ in range(cfg.blocks_per_stage[s])]
            for s in range(NUM_STAGES)
        ]
        self.downs = [Downsample2x(cs[s], rng, dtype) for s in range(NUM_STAGES - 1)]

    def forward(self, img):
        feats = []
        x = self.embed(img)
        for s in range(NUM_STAGES):
            if s > 0:
                x = self.downs[s - 1](x)
            for block in self.stages[s]:
                x = block(x)
            feats.append(x)
        return feats

    __call__ = forward


class Decoder(Module):
    """Four skip-fused upsampling blocks, final x-patch restore, and head."""

    def __init__(self, cfg, rng, dtype):
        cs = cfg.stage_channels
        self.ups = [
            UpsampleBlock(cs[s + 1], cs[s], rng, dtype)
            for s in reversed(range(NUM_STAGES - 1))
        ]
        self.refine = SepConv3x3(cs[0], rng, dtype)
        bound = 1.0 / math.sqrt(cs[0])
        self.head_w = uniform_init(rng, (cfg.num_classes, cs[0]), bound, dtype)
        self.head_b = uniform_init(rng, (cfg.num_classes,), bound, dtype)
        self.patch = cfg.patch

    def forward(self, feats):
        x = feats[-1]
        for up, s in zip(self.ups, reversed(range(NUM_STAGES - 1))):
            x = up(x, feats[s])
        steps = int(math.log2(self.patch)) if self.patch > 1 else 0
        for _ in range(steps):
            x = T.bilinear_upsample2x(x)
        x = self.refine(x)
        return T.conv2d_pointwise(x, self.head_w, self.head_b)

    __call__ = forward


class RsmSS(Module):
    """Segmentation model: encoder, skip decoder, per-pixel logits."""

    def __init__(self, cfg, rng, dtype=np.float32):
        if cfg.task != TASK_SEGMENTATION:
            raise ValueError("RsmSS requires a segmentation config")
        self.cfg = cfg
        self.encoder = Encoder(cfg, rng, dtype)
        self.decoder = Decoder(cfg, rng, dtype)

    def forward(self, img):
        _check_extents(self.cfg, img.shape[-2], img.shape[-1])
        return self.decoder(self.encoder(img))

    __call__ = forward


class RsmCD(Module):
    """Change detector: one weight-shared encoder applied to both epochs,
    per-stage concat+project fusion, then the same skip decoder."""

    def __init__(self, cfg, rng, dtype=np.float32):
        if cfg.task != TASK_CHANGE_DETECTION:
            raise ValueError("RsmCD requires a change_detection config")
        self.cfg = cfg
        self.encoder = Encoder(cfg, rng, dtype)
        self.fuse_w = []
        self.fuse_b = []
        for c in cfg.stage_channels:
            bound = 1.0 / math.sqrt(2 * c)
            self.fuse_w.append(uniform_init(rng, (c, 2 * c), bound, dtype))
            self.fuse_b.append(uniform_init(rng, (c,), bound, dtype))
        self.decoder = Decoder(cfg, rng, dtype)

    def forward(self, img_t1, img_t2):
        if img_t1.shape != img_t2.shape:
            raise ShapeError(
                f"change detection inputs differ: {img_t1.shape} vs {img_t2.shape}"
            )
        _check_extents(self.cfg, img_t1.shape[-2], img_t1.shape[-1])
        f1 = self.encoder(img_t1)
        f2 = self.encoder(img_t2)
        fused = [
            T.conv2d_pointwise(T.concat([a, b], axis=1), w, bias)
            for a, b, w, bias in zip(f1, f2, self.fuse_w, self.fuse_b)
        ]
        return self.decoder(fused)

    __call__ = forward


def build_model(cfg, seed=0, dtype=np.float32):
    """Deterministically initialize the model named by cfg.task."""
    rng = np.random.default_rng(seed)
    if cfg.task == TASK_CHANGE_DETECTION:
        return RsmCD(cfg, rng, dtype)
    return RsmSS(cfg, rng, dtype)
