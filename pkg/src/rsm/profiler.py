"""Analytic parameter and FLOP counting (no execution).

Counting conventions, fixed for reproducibility:
  - one multiply-add = 2 flops, so a linear map of C_in -> C_out applied to
    L tokens costs 2*L*C_in*C_out; biases are not counted
  - normalization = 4 flops per normalized element
  - activations and elementwise gates/sums = 1 flop per element
  - bilinear resampling = 4 flops per output element
  - the selective scan = 8 flops per (position, state) element per channel
    per direction (discretize 4, state update 2, output contraction 2);
    its input projections are counted as ordinary linear layers
  - the attention reference counts one multi-head self-attention layer as
    8*L*d*d (q/k/v/out projections) + 4*L*L*d (scores and weighted sum)

Parameter counts mirror the constructors in blocks.py/models.py exactly;
a test cross-checks them against a walked checkpoint table.
"""

from __future__ import annotations

import dataclasses

from .errors import ShapeError
from .models import NUM_STAGES, TASK_CHANGE_DETECTION, ModelConfig

SCAN_FLOPS_PER_STATE = 8
NORM_FLOPS = 4
RESAMPLE_FLOPS = 4


@dataclasses.dataclass
class CostReport:
    model_id: str
    image_size: int
    params: int
    flops: int
    breakdown: dict

    def total_check(self):
        return sum(self.breakdown.values()) == self.flops


# ---------------------------------------------------------------------------
# parameters


def _ssm_params(channels, state_dim):
    c, n = channels, state_dim
    return c * n + c * c + c + c * n + c * n + c  # a_log, delta_w/b, b_w, c_w, d


def _block_params(cfg, channels):
    inner = channels * cfg.expansion
    k = cfg.dw_kernel
    p = 2 * channels  # pre-norm
    p += inner * channels + inner  # widen
    p += inner * channels + inner  # gate
    p += inner * k * k + inner  # depthwise
    n_dir = 1 if cfg.shared_direction_params else _num_directions(cfg)
    p += n_dir * _ssm_params(inner, cfg.state_dim)
    p += 2 * inner  # post-norm
    p += channels * inner + channels  # narrow
    return p


def _num_directions(cfg):
    return {"ss1d": 2, "ss2d": 4, "ossm": 8}[cfg.mode.lower()]


def count_params(cfg):
    """Learnable scalars allocated by build_model(cfg), exactly."""
    cs = cfg.stage_channels
    p = cs[0] * (cfg.in_channels * cfg.patch ** 2) + cs[0]  # patch embed
    for s in range(NUM_STAGES):
        p += cfg.blocks_per_stage[s] * _block_params(cfg, cs[s])
        if s < NUM_STAGES - 1:
            p += 2 * cs[s] * 4 * cs[s] + 2 * cs[s]  # downsample
    for s in reversed(range(NUM_STAGES - 1)):  # decoder
        p += cs[s] * (cs[s + 1] + cs[s]) + cs[s]
    p += cs[0] * 9 + cs[0] + cs[0] * cs[0] + cs[0]  # separable 3x3 refine
    p += cfg.num_classes * cs[0] + cfg.num_classes  # head
    if cfg.task == TASK_CHANGE_DETECTION:
        for c in cs:
            p += c * 2 * c + c  # per-stage fusion
    return p


# ---------------------------------------------------------------------------
# flops


def _block_flops(cfg, channels, pixels):
    inner = channels * cfg.expansion
    n_dir = _num_directions(cfg)
    tokens = n_dir * pixels  # directions are stacked for the scan
    f = NORM_FLOPS * pixels * channels  # pre-norm
    f += 2 * (2 * pixels * channels * inner)  # widen + gate projections
    f += 2 * pixels * inner * cfg.dw_kernel ** 2  # depthwise
    f += 2 * pixels * inner  # two SiLU activations
    f += 2 * tokens * inner * inner  # dt projection
    f += tokens * inner  # softplus
    f += 2 * (2 * tokens * inner * cfg.state_dim)  # B and C projections
    f += SCAN_FLOPS_PER_STATE * tokens * inner * cfg.state_dim  # recurrence
    f += 2 * tokens * inner  # skip path D*u
    f += (n_dir - 1) * pixels * inner  # direction sum
    f += NORM_FLOPS * pixels * inner  # post-norm
    f += pixels * inner  # gating product
    f += 2 * pixels * inner * channels  # narrow
    f += pixels * channels  # residual add
    return f


def _encoder_flops(cfg, size):
    cs = cfg.stage_channels
    out = {}
    side = size // cfg.patch
    out["patch_embed"] = 2 * side * side * (cfg.in_channels * cfg.patch ** 2) * cs[0]
    for s in range(NUM_STAGES):
        pixels = side * side
        f = cfg.blocks_per_stage[s] * _block_flops(cfg, cs[s], pixels)
        if s < NUM_STAGES - 1:
            f += 2 * (pixels // 4) * (4 * cs[s]) * (2 * cs[s])  # downsample
            side //= 2
        out[f"stage{s + 1}"] = f
    return out


def _decoder_flops(cfg, size):
    cs = cfg.stage_channels
    side = size // cfg.patch // (1 << (NUM_STAGES - 1))
    f = 0
    for s in reversed(range(NUM_STAGES - 1)):
        side *= 2
        pixels = side * side
        f += RESAMPLE_FLOPS * pixels * cs[s + 1]  # bilinear 2x
        f += 2 * pixels * (cs[s + 1] + cs[s]) * cs[s]  # fuse conv
    while side < size:
        side *= 2
        f += RESAMPLE_FLOPS * side * side * cs[0]  # restore to input resolution
    pixels = size * size
    f += 2 * pixels * cs[0] * 9 + 2 * pixels * cs[0] * cs[0]  # separable refine
    f += 2 * pixels * cs[0] * cfg.num_classes  # head
    return f


def count_costs(cfg, image_size):
    """Analytic cost report for one forward pass at batch size 1."""
    if image_size % cfg.divisor:
        raise ShapeError(
            f"count_costs: image size {image_size} must be a multiple of {cfg.divisor}"
        )
    breakdown = {}
    enc = _encoder_flops(cfg, image_size)
    two_streams = 2 if cfg.task == TASK_CHANGE_DETECTION else 1
    for k, v in enc.items():
        breakdown[k] = two_streams * v
    if cfg.task == TASK_CHANGE_DETECTION:
        side = image_size // cfg.patch
        f = 0
        for s, c in enumerate(cfg.stage_channels):
            f += 2 * side * side * (2 * c) * c
            if s < NUM_STAGES - 1:
                side //= 2
        breakdown["fusion"] = f
    breakdown["decoder"] = _decoder_flops(cfg, image_size)
    model_id = "rsm-cd" if cfg.task == TASK_CHANGE_DETECTION else "rsm-ss"
    return CostReport(
        model_id=model_id,
        image_size=image_size,
        params=count_params(cfg),
        flops=sum(breakdown.values()),
        breakdown=breakdown,
    )


def count_attention_reference(embed_dim, heads, tokens):
    """Flops of one standard multi-head self-attention layer.

    The count is head-independent: projections cost 8*L*d^2 and the score
    plus weighted-sum terms cost 4*L^2*d.
    """
    del heads
    d, length = int(embed_dim), int(tokens)
    return 8 * length * d * d + 4 * length * length * d


# ViT-S-like reference encoder used in the scaling table
ATTN_REF = {"embed_dim": 384, "heads": 6, "layers": 12, "token_patch": 16}


def _attention_ref_report(size):
    d = ATTN_REF["embed_dim"]
    layers = ATTN_REF["layers"]
    tokens = (size // ATTN_REF["token_patch"]) ** 2
    flops = layers * count_attention_reference(d, ATTN_REF["heads"], tokens)
    # parameters: per layer 4d^2 attention + 8d^2 mlp, plus the patch embed
    params = layers * 12 * d * d + 3 * ATTN_REF["token_patch"] ** 2 * d
    return CostReport("attention-ref", size, params, flops, {"attention": flops})


MODEL_IDS = ("rsm-ss", "rsm-cd", "attention-ref")


def report_for(model_id, size, cfg=None):
    if model_id == "attention-ref":
        return _attention_ref_report(size)
    if cfg is None:
        task = TASK_CHANGE_DETECTION if model_id == "rsm-cd" else "segmentation"
        cfg = ModelConfig(task=task)
    return count_costs(cfg, size)


def scaling_table(model_id, sizes, cfg=None):
    """CSV rows (model, params, size, flops, ratio-to-previous-size)."""
    if model_id not in MODEL_IDS:
        raise ValueError(f"unknown model id '{model_id}' (expected one of {MODEL_IDS})")
    lines = ["model,params,size,flops,ratio"]
    prev = None
    for size in sizes:
        rep = report_for(model_id, size, cfg)
        ratio = "" if prev is None else f"{rep.flops / prev:.4f}"
        lines.append(f"{model_id},{rep.params},{size},{rep.flops},{ratio}")
        prev = rep.flops
    return "\n".join(lines) + "\n"
