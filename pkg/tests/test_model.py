import json

import numpy as np
import pytest

from attcdcnet.autograd import Tensor
from attcdcnet.errors import ConfigurationError, DimensionError
from attcdcnet.layers import separable_macs, standard_macs
from attcdcnet.model import (
    ModelConfig,
    build_model,
    complexity_report,
    count_parameters,
    forward_classify,
    summarize,
)

from conftest import tiny_config


def densenet_param_oracle(num_classes, layout=(6, 12, 24, 16), k=32, bn=4, stem=64, sep=False, att_r=None):
    """Closed-form parameter count, layer by layer."""
    total = 3 * stem * 49 + 2 * stem
    c = stem
    for i, n in enumerate(layout):
        for _ in range(n):
            inner = bn * k
            conv2 = inner * 9 + inner * k if sep else inner * k * 9
            total += 2 * c + c * inner + 2 * inner + conv2
            c += k
        if att_r:
            h = c // att_r
            total += c * h + h + h * c + c
        if i < len(layout) - 1:
            total += 2 * c + c * (c // 2)
            c //= 2
    return total + 2 * c + c * num_classes + num_classes


def test_baseline_counts():
    assert count_parameters(build_model(ModelConfig.baseline(4))) == 6_957_956
    assert count_parameters(build_model(ModelConfig.baseline(1000))) == 7_978_856
    assert densenet_param_oracle(4) == 6_957_956


def test_enhanced_count_matches_oracle_and_is_smaller():
    n = count_parameters(build_model(ModelConfig.enhanced(4)))
    assert n == densenet_param_oracle(4, sep=True, att_r=16) == 5_430_324
    assert n < 6_957_956


@pytest.mark.parametrize("r", [8, 16, 32])
def test_enhanced_smaller_for_any_reduction(r):
    cfg = ModelConfig.enhanced(4, attention_reduction=r)
    assert count_parameters(build_model(cfg)) == densenet_param_oracle(4, sep=True, att_r=r) < 6_957_956


def test_summary_rows_sum_to_total_and_serialize():
    model = build_model(ModelConfig.enhanced(4))
    summary = summarize(model)
    assert sum(r.params for r in summary.rows) == summary.total_params == count_parameters(model)
    data = json.loads(summary.to_json())
    assert {"name", "out_shape", "params", "macs_standard", "macs_separable"} <= set(data[0])
    assert summary.rows[-1].out_shape == (4,)
    assert "conv0" in summary.to_text()


def test_summary_shapes_follow_pooling_cascade():
    rows = {r.name: r.out_shape for r in summarize(build_model(ModelConfig.baseline(4))).rows}
    assert rows["conv0"] == (64, 112, 112)
    assert rows["pool0"] == (64, 56, 56)
    assert rows["transition1.pool"] == (128, 28, 28)
    assert rows["transition3.pool"] == (512, 7, 7)
    assert rows["norm5"] == (1024, 7, 7)


def test_complexity_report_sites_and_ratio():
    report = complexity_report(build_model(ModelConfig.baseline(4)))
    assert len(report.sites) == 58
    for site in report.sites:
        assert site.macs_standard == standard_macs(site.m, site.n, site.dk, *site.dp)
        assert site.macs_separable == separable_macs(site.m, site.n, site.dk, *site.dp)
        assert site.ratio == pytest.approx(1 / site.n + 1 / site.dk**2, rel=1e-12)
    first = report.sites[0]
    assert (first.m, first.n, first.dk, first.dp) == (128, 32, 3, (56, 56))
    assert report.ratio == pytest.approx(report.total_separable / report.total_standard)


def test_table1_site_example():
    assert standard_macs(128, 32, 3, 28) == 28_901_376
    assert separable_macs(128, 32, 3, 28) == 4_114_432


def test_forward_shapes_and_purity(rng):
    model = build_model(tiny_config(attention=True, conv_mode="depthwise_separable"))
    x = Tensor(rng.standard_normal((2, 3, 32, 32)))
    a = forward_classify(model, x, "eval").data
    b = forward_classify(model, x, "eval").data
    assert a.shape == (2, 4) and a.tobytes() == b.tobytes()


def test_train_mode_updates_running_stats_only_in_train(rng):
    model = build_model(tiny_config())
    before = model.norm0.running_mean.copy()
    forward_classify(model, Tensor(rng.standard_normal((2, 3, 32, 32))), "eval")
    np.testing.assert_array_equal(model.norm0.running_mean, before)
    forward_classify(model, Tensor(rng.standard_normal((2, 3, 32, 32))), "train")
    assert not np.array_equal(model.norm0.running_mean, before)


def test_input_validation(rng):
    model = build_model(ModelConfig.baseline(4))
    with pytest.raises(DimensionError, match="minimum"):
        model(Tensor(rng.standard_normal((1, 3, 16, 16))))
    with pytest.raises(DimensionError, match="channels"):
        model(Tensor(rng.standard_normal((1, 1, 64, 64))))
    with pytest.raises(ConfigurationError):
        forward_classify(model, Tensor(rng.standard_normal((1, 3, 32, 32))), "predict")


def test_config_validation_and_roundtrip():
    with pytest.raises(ConfigurationError):
        ModelConfig(num_classes=1)
    with pytest.raises(ConfigurationError):
        ModelConfig(conv_mode="grouped")
    with pytest.raises(ConfigurationError):
        ModelConfig(input_size=16)
    with pytest.raises(ConfigurationError):
        build_model(ModelConfig.enhanced(4, attention_reduction=7))
    cfg = ModelConfig.enhanced(3, separable_blocks=(2, 4))
    assert ModelConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    assert [cfg.block_is_separable(i) for i in (1, 2, 3, 4)] == [False, True, False, True]


def test_default_cam_layer():
    assert build_model(tiny_config(attention=True)).default_cam_layer == "attention2"
    assert build_model(tiny_config()).default_cam_layer == "denseblock2"
