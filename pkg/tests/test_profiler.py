"""Analytic cost model: exact parameter agreement with allocated models,
linear pixel scaling, and the attention reference's quadratic growth."""

import numpy as np
import pytest

from rsm.checkpoint import read_checkpoint, save_checkpoint
from rsm.errors import ShapeError
from rsm.models import ModelConfig, build_model
from rsm.profiler import (
    count_attention_reference,
    count_costs,
    count_params,
    report_for,
    scaling_table,
)

TINY = dict(patch=2, base_channels=4, blocks_per_stage=(1, 1, 1, 1, 1), state_dim=2)


class TestParams:
    @pytest.mark.parametrize("task", ["segmentation", "change_detection"])
    @pytest.mark.parametrize("shared", [True, False])
    def test_params_match_allocated_model_exactly(self, task, shared, tmp_path):
        cfg = ModelConfig(task=task, shared_direction_params=shared, **TINY)
        model = build_model(cfg, seed=0)
        assert count_params(cfg) == model.num_params()
        # cross-check by walking the checkpoint table
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        table = read_checkpoint(path)
        assert count_params(cfg) == sum(int(np.prod(a.shape)) for a in table.values())

    def test_params_match_desk_default(self):
        for task in ("segmentation", "change_detection"):
            cfg = ModelConfig(task=task)
            assert count_params(cfg) == build_model(cfg, seed=0).num_params()

    def test_params_independent_of_image_size(self):
        cfg = ModelConfig(**TINY)
        assert count_costs(cfg, 64).params == count_costs(cfg, 128).params


class TestFlops:
    def test_linear_layer_convention(self):
        # one C_in -> C_out map over L tokens costs 2*L*C_in*C_out
        cfg = ModelConfig(**TINY)
        rep = count_costs(cfg, 32)
        tokens = (32 // cfg.patch) ** 2
        assert rep.breakdown["patch_embed"] == 2 * tokens * (3 * cfg.patch ** 2) * 4

    def test_doubling_image_side_quadruples_flops(self):
        cfg = ModelConfig(**TINY)
        f64 = count_costs(cfg, 64).flops
        f128 = count_costs(cfg, 128).flops
        assert f128 == 4 * f64

    def test_breakdown_sums_to_total(self):
        for task in ("segmentation", "change_detection"):
            rep = count_costs(ModelConfig(task=task, **TINY), 64)
            assert rep.total_check()

    def test_scan_flops_linear_in_pixels(self):
        cfg = ModelConfig()
        per_pixel = [count_costs(cfg, s).flops / (s * s) for s in (64, 128, 256, 512)]
        for v in per_pixel[1:]:
            assert abs(v - per_pixel[0]) / per_pixel[0] < 0.10

    def test_incompatible_size_rejected(self):
        with pytest.raises(ShapeError):
            count_costs(ModelConfig(), 100)


class TestAttentionReference:
    def test_single_token_projection_only(self):
        d = 16
        assert count_attention_reference(d, 4, 1) == 8 * d * d + 4 * d

    def test_zero_dim_is_zero(self):
        assert count_attention_reference(0, 4, 10) == 0

    def test_doubling_image_side_ratio_between_4_and_16(self):
        # doubling the image side quadruples tokens: projections grow 4x,
        # score terms 16x, so the total sits strictly between
        d = 384
        for length in (256, 1024, 4096):
            ratio = count_attention_reference(d, 6, 4 * length) / count_attention_reference(d, 6, length)
            assert 4.0 < ratio < 16.0

    def test_ratio_approaches_quadratic(self):
        d = 384
        big = count_attention_reference(d, 6, 1 << 16)
        ratio = count_attention_reference(d, 6, 1 << 17) / big
        assert ratio > 3.9


class TestScalingTable:
    def test_header_only_for_empty_sizes(self):
        assert scaling_table("rsm-cd", []) == "model,params,size,flops,ratio\n"

    def test_rsm_cd_ratio_column_near_four(self):
        csv = scaling_table("rsm-cd", [64, 128, 256, 512])
        ratios = [float(line.split(",")[4]) for line in csv.splitlines()[2:]]
        assert all(3.8 <= r <= 4.3 for r in ratios)

    def test_attention_ratio_exceeds_six_at_largest_pair(self):
        csv = scaling_table("attention-ref", [64, 128, 256, 512, 1024])
        last_ratio = float(csv.splitlines()[-1].split(",")[4])
        assert last_ratio > 6.0

    def test_params_column_constant(self):
        csv = scaling_table("rsm-ss", [64, 128])
        rows = [line.split(",") for line in csv.splitlines()[1:]]
        assert rows[0][1] == rows[1][1]

    def test_unknown_model_rejected(self):
        with pytest.raises(ValueError):
            scaling_table("resnet", [64])

    def test_report_ids(self):
        assert report_for("rsm-cd", 64).model_id == "rsm-cd"
        assert report_for("attention-ref", 64).model_id == "attention-ref"
