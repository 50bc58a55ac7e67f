import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from module.attention import (
    AemConfig,
    AemParams,
    PamConfig,
    PamParams,
    aem_forward,
    pam_attention,
    pam_forward,
    reduced_width,
    se_forward,
)
from module.gradcheck import run_named_check
from module.tensor import Tensor
from utils.errors import ShapeError


def random_pam(rng, cfg, dtype=np.float64, scale=0.5):
    shapes = PamParams.shapes(cfg)
    store = {f"p.{k}": Tensor(scale * rng.standard_normal(s), dtype=dtype) for k, s in shapes.items()}
    return PamParams.from_store(store, "p")


def random_aem(rng, cfg, scale=0.5):
    shapes = AemParams.shapes(cfg)
    store = {f"aem.{k}": Tensor(scale * rng.standard_normal(s)) for k, s in shapes.items()}
    return AemParams.from_store(store)


def test_reduced_width_is_clamped():
    assert reduced_width(8, 16) == 4
    assert reduced_width(128, 16) == 8
    assert PamConfig(channels=64, reduction=16, min_reduced=2).reduced == 4


def test_zero_gating_gives_one_and_a_half_times_input(rng):
    x = rng.standard_normal((2, 8, 8, 8)).astype(np.float32)
    cfg = PamConfig(channels=8, patch=(4, 4))
    out = pam_forward(Tensor(x), PamParams.zeros(cfg, np.float32), cfg)
    assert out.dtype == np.float32
    assert_array_equal(out.data, x * np.float32(1.5))

    acfg = AemConfig(c_high=16, c_low=8, high_patch=(2, 2), upsample=(8, 8))
    x_low = rng.standard_normal((2, 8, 16, 16)).astype(np.float32)
    x_high = Tensor(rng.standard_normal((2, 16, 4, 4)), dtype=np.float32)
    out = aem_forward(Tensor(x_low), x_high, AemParams.zeros(acfg, np.float32), acfg)
    assert_array_equal(out.data, x_low * np.float32(1.5))


@pytest.mark.parametrize("case", range(50))
def test_full_extent_patch_reduces_to_se(case):
    rng = np.random.default_rng(case)
    c = int(rng.integers(1, 9))
    h, w = int(rng.integers(1, 7)), int(rng.integers(1, 7))
    x = Tensor(rng.standard_normal((int(rng.integers(1, 3)), c, h, w)))
    cfg = PamConfig(channels=c, patch=(h, w), reduction=2, min_reduced=2)
    params = random_pam(rng, cfg)
    residual = pam_forward(x, params, cfg).data - x.data
    assert_allclose(residual, se_forward(x, params).data, atol=1e-6, rtol=0)


def test_structural_properties_over_generated_cases():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        hp, wp = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        gh, gw = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        c = int(rng.integers(1, 6))
        cfg = PamConfig(channels=c, patch=(hp, wp), reduction=2, min_reduced=1)
        params = random_pam(rng, cfg)
        x = rng.uniform(0.1, 2.0, size=(1, c, hp * gh, wp * gw))
        out = pam_forward(Tensor(x), params, cfg).data

        # 形状不变
        assert out.shape == x.shape
        # 残差上下界：x > 0 时 1 < out / x < 2
        ratio = out / x
        assert np.all(ratio > 1.0) and np.all(ratio < 2.0)
        a = pam_attention(Tensor(x), params, cfg).data
        assert np.all((a > 0) & (a < 1))

        # patch 局部性：只改一个 patch，其余 patch 的输出不变
        i, j = int(rng.integers(0, gh)), int(rng.integers(0, gw))
        x2 = x.copy()
        x2[:, :, i * hp:(i + 1) * hp, j * wp:(j + 1) * wp] += rng.uniform(0.5, 1.0)
        out2 = pam_forward(Tensor(x2), params, cfg).data
        mask = np.ones(x.shape, dtype=bool)
        mask[:, :, i * hp:(i + 1) * hp, j * wp:(j + 1) * wp] = False
        assert_array_equal(out2[mask], out[mask])


def test_pam_rejects_indivisible_map_and_channel_mismatch(rng):
    cfg = PamConfig(channels=4, patch=(4, 4))
    params = random_pam(rng, cfg)
    with pytest.raises(ShapeError, match="patch"):
        pam_forward(Tensor(np.ones((1, 4, 6, 8))), params, cfg)
    with pytest.raises(ShapeError):
        pam_forward(Tensor(np.ones((1, 3, 8, 8))), params, cfg)


def test_aem_output_keeps_low_shape_and_reports_grid_mismatch(rng):
    cfg = AemConfig(c_high=8, c_low=4, high_patch=(2, 2), upsample=(8, 8), reduction=2, min_reduced=2)
    params = random_aem(rng, cfg)
    x_low = Tensor(rng.standard_normal((1, 4, 16, 16)))
    out = aem_forward(x_low, Tensor(rng.standard_normal((1, 8, 4, 4))), params, cfg)
    assert out.shape == x_low.shape
    with pytest.raises(ShapeError, match=r"24×24.*16×16"):
        aem_forward(x_low, Tensor(rng.standard_normal((1, 8, 6, 6))), params, cfg)


def test_aem_attention_is_shared_within_a_descriptor_block(rng):
    cfg = AemConfig(c_high=8, c_low=4, high_patch=(2, 2), upsample=(8, 8), reduction=2, min_reduced=2)
    params = random_aem(rng, cfg)
    x_low = np.ones((1, 4, 16, 16))
    out = aem_forward(Tensor(x_low), Tensor(rng.standard_normal((1, 8, 4, 4))), params, cfg).data
    block = out[:, :, :8, :8]
    assert_array_equal(block, np.broadcast_to(block[:, :, :1, :1], block.shape))


@pytest.mark.parametrize("target", ["pam", "aem"])
def test_attention_gradients_pass_finite_differences(target):
    assert run_named_check(target) < 1e-4


def test_aem_matches_direct_evaluation_on_tiny_case(rng):
    cfg = AemConfig(c_high=2, c_low=1, high_patch=(2, 2), upsample=(4, 4), reduction=2, min_reduced=1)
    assert cfg.reduced == 1
    params = random_aem(rng, cfg, scale=1.0)
    x_high = rng.standard_normal((1, 2, 2, 2))
    x_low = rng.standard_normal((1, 1, 4, 4))
    out = aem_forward(Tensor(x_low), Tensor(x_high), params, cfg).data

    w1 = params.w_reduce.data.reshape(2)
    w2 = float(params.w_project.data.reshape(()))
    z = [sum(x_high[0, c].ravel()) / 4 for c in range(2)]
    hidden = max(0.0, w1[0] * z[0] + w1[1] * z[1] + float(params.b_reduce.data[0]))
    gate = 1.0 / (1.0 + math.exp(-(w2 * hidden + float(params.b_project.data[0]))))
    expected = x_low + x_low * gate
    assert_allclose(out, expected, rtol=0, atol=1e-14)


def test_aem_structural_properties_over_generated_cases():
    rng = np.random.default_rng(17)
    for _ in range(1000):
        hp, wp = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        gh, gw = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        fh, fw = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        c_high, c_low = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        cfg = AemConfig(c_high=c_high, c_low=c_low, high_patch=(hp, wp), upsample=(fh, fw), reduction=2, min_reduced=1)
        params = random_aem(rng, cfg)
        x_high = Tensor(rng.standard_normal((1, c_high, hp * gh, wp * gw)))
        x_low = rng.uniform(0.1, 2.0, size=(1, c_low, gh * fh, gw * fw))
        out = aem_forward(Tensor(x_low), x_high, params, cfg).data

        assert out.shape == x_low.shape
        ratio = out / x_low
        assert np.all(ratio > 1.0) and np.all(ratio < 2.0)


def test_attention_commutes_with_flips_over_generated_cases():
    rng = np.random.default_rng(27)
    for _ in range(1000):
        axis = int(rng.choice([-1, -2]))
        hp, wp = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        c = int(rng.integers(1, 5))
        cfg = PamConfig(channels=c, patch=(hp, wp), reduction=2, min_reduced=1)
        params = random_pam(rng, cfg)
        x = rng.standard_normal((1, c, hp * int(rng.integers(1, 4)), wp * int(rng.integers(1, 4))))
        out = pam_forward(Tensor(x), params, cfg).data
        flipped = pam_forward(Tensor(np.flip(x, axis)), params, cfg).data
        assert_allclose(flipped, np.flip(out, axis), rtol=0, atol=1e-12)

        acfg = AemConfig(c_high=c, c_low=2, high_patch=(hp, wp), upsample=(2, 2), reduction=2, min_reduced=1)
        aparams = random_aem(rng, acfg)
        x_low = rng.standard_normal((1, 2, 2 * x.shape[2] // hp, 2 * x.shape[3] // wp))
        out = aem_forward(Tensor(x_low), Tensor(x), aparams, acfg).data
        flipped = aem_forward(Tensor(np.flip(x_low, axis)), Tensor(np.flip(x, axis)), aparams, acfg).data
        assert_allclose(flipped, np.flip(out, axis), rtol=0, atol=1e-12)
