"""Network building blocks: the omnidirectional scan module, the gated
scan block built around it, and the patch/resolution plumbing."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .nn import Module, full_init, uniform_init
from .ssm import SsmParams, selective_scan_parallel, selective_scan_sequential
from .traversal import MODE_DIRECTIONS, apply_ordering, inverse_ordering, make_orderings


@dataclass
class OssmConfig:
    """Direction set and scan parameters for one Ossm module."""

    channels: int
    state_dim: int = 8
    mode: str = "ossm"  # ss1d (2 directions), ss2d (4), ossm (8)
    shared_direction_params: bool = True
    scan_impl: str = "sequential"  # or "parallel"; identical outputs
    exact_discretization: bool = True

    def num_directions(self):
        return len(MODE_DIRECTIONS[self.mode.lower()])


def _scan_fn(impl):
    if impl == "parallel":
        return selective_scan_parallel
    if impl == "sequential":
        return selective_scan_sequential
    raise ValueError(f"unknown scan_impl '{impl}'")


class Ossm(Module):
    """Selective scan along every configured grid direction, summed.

    The grid is flattened, reordered per direction, scanned, restored to
    row-major order, and the direction outputs are added elementwise. With
    shared parameters the directions are stacked on the batch axis and run
    as a single scan.
    """

    def __init__(self, cfg, rng, dtype=np.float32):
        self.cfg = cfg
        d = cfg.num_directions()
        mk = lambda: SsmParams(
            cfg.channels, cfg.state_dim, rng, dtype, cfg.exact_discretization
        )
        if cfg.shared_direction_params:
            self.params = mk()
        else:
            self.direction_params = [mk() for _ in range(d)]

    def forward(self, x):
        if x.ndim != 4:
            raise ShapeError(f"ossm: expected [B, C, H, W], got {x.shape}")
        bsz, c, h, w = x.shape
        if c != self.cfg.channels:
            raise ShapeError(f"ossm: {c} channels vs params built for {self.cfg.channels}")
        orderings = make_orderings(h, w, self.cfg.mode)
        d = len(orderings)
        scan = _scan_fn(self.cfg.scan_impl)
        xf = T.reshape(x, (bsz, c, h * w))
        seqs = [apply_ordering(xf, o) for o in orderings]

        if self.cfg.shared_direction_params:
            stacked = T.concat([T.reshape(s, (bsz, 1, c, h * w)) for s in seqs], axis=1)
            flat = T.reshape(stacked, (bsz * d, c, h * w))
            y = T.reshape(scan(flat, self.params), (bsz, d, c, h * w))
            parts = T.split(y, d, axis=1)
            outs = [
                inverse_ordering(T.reshape(p, (bsz, c, h * w)), o)
                for p, o in zip(parts, orderings)
            ]
        else:
            outs = [
                inverse_ordering(scan(s, prm), o)
                for s, prm, o in zip(seqs, self.direction_params, orderings)
            ]

        acc = outs[0]
        for o in outs[1:]:
            acc = T.add(acc, o)
        return T.reshape(acc, (bsz, c, h, w))

    __call__ = forward


class OssBlock(Module):
    """Pre-norm gated block: widen, depthwise conv, omnidirectional scan,
    norm, gate with a parallel SiLU branch, narrow, residual add."""

    def __init__(self, channels, rng, dtype=np.float32, expansion=2, dw_kernel=3,
                 state_dim=8, mode="ossm", shared_direction_params=True,
                 scan_impl="parallel", exact_discretization=True):
        inner = channels * expansion
        self.channels = channels
        self.norm_g = full_init((channels,), 1.0, dtype)
        self.norm_b = full_init((channels,), 0.0, dtype)
        bound = 1.0 / math.sqrt(channels)
        self.in_w = uniform_init(rng, (inner, channels), bound, dtype)
        self.in_b = uniform_init(rng, (inner,), bound, dtype)
        self.gate_w = uniform_init(rng, (inner, channels), bound, dtype)
        self.gate_b = uniform_init(rng, (inner,), bound, dtype)
        kb = 1.0 / dw_kernel
        self.dw_w = uniform_init(rng, (inner, dw_kernel, dw_kernel), kb, dtype)
        self.dw_b = uniform_init(rng, (inner,), kb, dtype)
        self.ossm = Ossm(
            OssmConfig(inner, state_dim, mode, shared_direction_params,
                       scan_impl, exact_discretization),
            rng, dtype,
        )
        self.post_g = full_init((inner,), 1.0, dtype)
        self.post_b = full_init((inner,), 0.0, dtype)
        ib = 1.0 / math.sqrt(inner)
        self.out_w = uniform_init(rng, (channels, inner), ib, dtype)
        self.out_b = uniform_init(rng, (channels,), ib, dtype)

    def forward(self, x):
        z = T.layernorm(x, self.norm_g, self.norm_b, axis=1)
        m = T.conv2d_pointwise(z, self.in_w, self.in_b)
        m = T.conv2d_depthwise(m, self.dw_w, self.dw_b)
        m = T.silu(m)
        m = self.ossm(m)
        m = T.layernorm(m, self.post_g, self.post_b, axis=1)
        gate = T.silu(T.conv2d_pointwise(z, self.gate_w, self.gate_b))
        out = T.conv2d_pointwise(T.mul(m, gate), self.out_w, self.out_b)
        return T.add(out, x)

    __call__ = forward


def space_to_depth(x, p):
    """[B, C, H, W] -> [B, C*p*p, H/p, W/p] by folding p x p cells into channels."""
    bsz, c, h, w = x.shape
    if h % p or w % p:
        raise ShapeError(f"space_to_depth: extents {h}x{w} not divisible by {p}")
    t = T.reshape(x, (bsz, c, h // p, p, w // p, p))
    t = T.transpose(t, (0, 1, 3, 5, 2, 4))
    return T.reshape(t, (bsz, c * p * p, h // p, w // p))


class PatchEmbed(Module):
    """Non-overlapping p x p linear projection (stride-p patch embedding)."""

    def __init__(self, in_channels, out_channels, patch, rng, dtype=np.float32):
        self.patch = patch
        fan_in = in_channels * patch * patch
        bound = 1.0 / math.sqrt(fan_in)
        self.w = uniform_init(rng, (out_channels, fan_in), bound, dtype)
        self.b = uniform_init(rng, (out_channels,), bound, dtype)

    def forward(self, x):
        h, w = x.shape[-2], x.shape[-1]
        if h % self.patch or w % self.patch:
            raise ShapeError(
                f"patch_embed: extents {h}x{w} must be divisible by patch {self.patch}"
            )
        return T.conv2d_pointwise(space_to_depth(x, self.patch), self.w, self.b)

    __call__ = forward


class Downsample2x(Module):
    """Strided 2x2 projection halving resolution and doubling channels."""

    def __init__(self, channels, rng, dtype=np.float32):
        bound = 1.0 / math.sqrt(4 * channels)
        self.w = uniform_init(rng, (2 * channels, 4 * channels), bound, dtype)
        self.b = uniform_init(rng, (2 * channels,), bound, dtype)

    def forward(self, x):
        h, w = x.shape[-2], x.shape[-1]
        if h % 2 or w % 2:
            raise ShapeError(f"downsample2x: extents must be even, got {h}x{w}")
        return T.conv2d_pointwise(space_to_depth(x, 2), self.w, self.b)

    __call__ = forward


class UpsampleBlock(Module):
    """Bilinear 2x, concat with the skip on channels, project to skip width."""

    def __init__(self, in_channels, skip_channels, rng, dtype=np.float32):
        bound = 1.0 / math.sqrt(in_channels + skip_channels)
        self.w = uniform_init(rng, (skip_channels, in_channels + skip_channels), bound, dtype)
        self.b = uniform_init(rng, (skip_channels,), bound, dtype)

    def forward(self, x, skip):
        up = T.bilinear_upsample2x(x)
        if up.shape[-2:] != skip.shape[-2:] or up.shape[0] != skip.shape[0]:
            raise ShapeError(
                f"upsample_block: upsampled {up.shape} does not match skip {skip.shape}"
            )
        return T.conv2d_pointwise(T.concat([up, skip], axis=1), self.w, self.b)

    __call__ = forward


class SepConv3x3(Module):
    """Depthwise 3x3 followed by a pointwise mix (separable 3x3 conv)."""

    def __init__(self, channels, rng, dtype=np.float32):
        self.dw_w = uniform_init(rng, (channels, 3, 3), 1.0 / 3.0, dtype)
        self.dw_b = uniform_init(rng, (channels,), 1.0 / 3.0, dtype)
        bound = 1.0 / math.sqrt(channels)
        self.pw_w = uniform_init(rng, (channels, channels), bound, dtype)
        self.pw_b = uniform_init(rng, (channels,), bound, dtype)

    def forward(self, x):
        return T.conv2d_pointwise(
            T.conv2d_depthwise(x, self.dw_w, self.dw_b), self.pw_w, self.pw_b
        )

    __call__ = forward
