import numpy as np
import pytest
from PIL import Image

from attcdcnet import functional as F
from attcdcnet.autograd import Tensor
from attcdcnet.errors import ContractError, DataError
from attcdcnet.explain import (
    export_overlay,
    grad_cam,
    jet,
    normalize_heatmap,
    quadrant_mass,
    render_overlay,
    save_heatmap_csv,
)
from attcdcnet.layers import Conv2d, Module
from attcdcnet.model import build_model

from conftest import tiny_config


class GapHead(Module):
    """Conv feature map followed by GAP; logit k is the mean of channel k."""

    default_cam_layer = "conv"

    def __init__(self, rng, k=1):
        super().__init__()
        self.conv = Conv2d(3, 4, k, 1, k // 2, rng=rng)

    def stage_names(self):
        return ["conv"]

    def forward_features(self, x, capture=()):
        fmap = self.conv(x)
        return F.global_avg_pool(fmap), {"conv": fmap}


def test_constant_feature_map_gives_uniform_heatmap(rng):
    model = GapHead(rng, k=1)
    result = grad_cam(model, Tensor(np.full((1, 3, 10, 10), 0.7, np.float32)), class_index=2)
    assert np.ptp(result.raw) == 0.0 and np.ptp(result.heatmap) == 0.0


def test_analytic_gap_case(rng):
    model = GapHead(rng, k=3)
    x = rng.standard_normal((1, 3, 9, 9)).astype(np.float32)
    for c in range(4):
        result = grad_cam(model, Tensor(x), class_index=c)
        fmap = F.conv2d(Tensor(x), model.conv.weight, 1, 1).data[0].astype(np.float64)
        np.testing.assert_allclose(result.raw, np.maximum(fmap[c] / 81, 0), atol=1e-6)
        assert result.class_index == c and result.layer == "conv"


def test_heatmap_range_determinism_and_default_class(rng):
    model = build_model(tiny_config(attention=True), seed=0)
    x = Tensor(rng.standard_normal((1, 3, 32, 32)))
    a, b = grad_cam(model, x), grad_cam(model, x)
    assert a.heatmap.shape == (32, 32) and a.heatmap.min() >= 0 and a.heatmap.max() <= 1
    assert a.heatmap.tobytes() == b.heatmap.tobytes()
    assert a.class_index == a.predicted
    assert a.probabilities.sum() == pytest.approx(1.0)
    assert all(p.grad is None for p in model.parameters())


def test_other_logits_do_not_affect_heatmap(rng):
    model = build_model(tiny_config(attention=True), seed=0)
    x = Tensor(rng.standard_normal((1, 3, 32, 32)))
    before = grad_cam(model, x, class_index=1).raw
    model.classifier.weight.data[[0, 2, 3]] *= -3.0
    model.classifier.bias.data[[0, 2, 3]] += 5.0
    np.testing.assert_array_equal(grad_cam(model, x, class_index=1).raw, before)


def test_every_stage_is_a_valid_target(rng):
    model = build_model(tiny_config(attention=True, conv_mode="depthwise_separable"), seed=0)
    x = Tensor(rng.standard_normal((1, 3, 32, 32)))
    for name in model.stage_names():
        try:
            result = grad_cam(model, x, 0, name)
        except ContractError as exc:
            assert "4-D" in str(exc)
            continue
        assert result.heatmap.shape == (32, 32) and np.all(np.isfinite(result.heatmap))


def test_gradcam_errors(rng):
    model = build_model(tiny_config(), seed=0)
    x = Tensor(rng.standard_normal((1, 3, 32, 32)))
    with pytest.raises(ContractError):
        grad_cam(model, x, class_index=4)
    with pytest.raises(ContractError, match="layer"):
        grad_cam(model, x, layer="denseblock9")
    with pytest.raises(ContractError):
        grad_cam(model, Tensor(rng.standard_normal((2, 3, 32, 32))))


def test_normalize_and_quadrant_mass():
    np.testing.assert_array_equal(normalize_heatmap(np.array([[1.0, 3.0], [2.0, 5.0]])), [[0, 0.5], [0.25, 1]])
    assert normalize_heatmap(np.zeros((3, 3))).max() == 0.0
    heat = np.zeros((8, 8))
    heat[:4, :4] = 1.0
    assert quadrant_mass(heat, 0) == 1.0 and quadrant_mass(heat, 3) == 0.0
    assert quadrant_mass(np.zeros((8, 8)), 0) == 0.0


def test_overlay_zero_heatmap_is_grayscale(rng):
    gray = rng.random((7, 5))
    out = render_overlay(gray, np.zeros((7, 5)))
    assert out.shape == (7, 5, 3) and out.dtype == np.uint8
    expect = np.round(gray * 255).astype(np.uint8)
    for ch in range(3):
        np.testing.assert_array_equal(out[..., ch], expect)
    with pytest.raises(ContractError):
        render_overlay(gray, np.zeros((5, 7)))


def test_jet_endpoints():
    np.testing.assert_allclose(jet(np.array([0.0, 1.0])), [[0, 0, 0.5], [0.5, 0, 0]])
    assert np.all((jet(np.linspace(0, 1, 50)) >= 0) & (jet(np.linspace(0, 1, 50)) <= 1))


def test_export_overlay_png(rng, tmp_path):
    gray, heat = rng.random((12, 10)), rng.random((12, 10))
    export_overlay(gray, heat, tmp_path / "a.png")
    export_overlay(gray, heat, tmp_path / "b.png")
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
    with Image.open(tmp_path / "a.png") as im:
        assert im.size == (10, 12) and im.mode == "RGB"
        np.testing.assert_array_equal(np.asarray(im), render_overlay(gray, heat))
    with pytest.raises(DataError):
        export_overlay(gray, heat, tmp_path / "missing_dir" / "c.png")


def test_heatmap_csv(tmp_path):
    heat = np.array([[0.0, 0.25], [0.5, 1.0]], np.float32)
    save_heatmap_csv(heat, tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text() == "0.0,0.25\n0.5,1.0\n"
