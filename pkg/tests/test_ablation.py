import numpy as np
import pandas as pd
import pytest

from module.ablation import (
    FAIL,
    INCONCLUSIVE,
    PASS,
    majority_share,
    run_ablation,
    summarize,
    trend_verdict,
)
from module.dataset import RasterSample, SampleMeta
from module.network import ABLATION_VARIANTS
from module.tensor import Tensor
from module.trainer import TrainHyper
from utils.errors import ConfigError, DataError


def summary_of(oa):
    return pd.DataFrame({
        "variant": list(oa),
        "oa_mean": list(oa.values()),
        "oa_half_range": [0.0] * len(oa),
        "f1_mean": list(oa.values()),
        "f1_half_range": [0.0] * len(oa),
    })


def test_trend_passes_with_clear_gains():
    verdict, reasons = trend_verdict(summary_of({"fcn": 0.80, "fcn-pam": 0.81, "fcn-aem": 0.805, "lanet": 0.82}), 0.3)
    assert verdict == PASS
    assert len(reasons) == 3


def test_trend_fails_when_lanet_gain_is_small():
    verdict, reasons = trend_verdict(summary_of({"fcn": 0.80, "fcn-pam": 0.81, "fcn-aem": 0.81, "lanet": 0.805}), 0.3)
    assert verdict == FAIL
    assert any("lanet" in r and "未通过" in r for r in reasons)


def test_trend_is_inconclusive_near_chance():
    verdict, _ = trend_verdict(summary_of({"fcn": 0.31, "lanet": 0.315}), 0.30)
    assert verdict == INCONCLUSIVE
    verdict, _ = trend_verdict(summary_of({"lanet": 0.9}), 0.30)
    assert verdict == INCONCLUSIVE


def test_summary_uses_mean_and_half_range():
    runs = pd.DataFrame({
        "variant": ["fcn", "lanet", "fcn", "lanet"],
        "seed": [0, 0, 1, 1],
        "oa": [0.70, 0.80, 0.74, 0.84],
        "mean_f1": [0.50, 0.60, 0.52, 0.66],
    })
    summary = summarize(runs, ["lanet", "fcn"])
    assert list(summary["variant"]) == ["lanet", "fcn"]
    assert summary["oa_mean"].tolist() == pytest.approx([0.82, 0.72])
    assert summary["oa_half_range"].tolist() == pytest.approx([0.02, 0.02])
    assert summary["f1_half_range"].tolist() == pytest.approx([0.03, 0.01])


def test_majority_share():
    labels = np.array([[0, 0, 0], [1, 2, 0]], dtype=np.uint8)
    sample = RasterSample(Tensor(np.zeros((1, 4, 2, 3)), dtype=np.float32), labels, SampleMeta("s", 0, 3))
    assert majority_share([sample, sample], 6) == pytest.approx(4 / 6)


def test_run_ablation_without_learning_is_inconclusive(tiny_arch, tiny_dataset, tiny_samples):
    from module.dataset import load_split

    test_samples = load_split(tiny_dataset, "test")
    # lr = 0：参数停在初始化，预测恒为类 0，OA 不超过多数类占比
    hyper = TrainHyper(lr=0.0, steps=1, batch=1, crop=64, log_every=1)
    lines = []
    result = run_ablation(tiny_samples, test_samples, tiny_arch, hyper, seeds=[0, 1],
                          tile=64, overlap=32, progress=lines.append)
    assert len(result.runs) == 2 * len(ABLATION_VARIANTS)
    assert len(lines) == 2 * len(ABLATION_VARIANTS)
    assert list(result.summary["variant"]) == list(ABLATION_VARIANTS)
    assert result.verdict == INCONCLUSIVE
    assert (result.summary["oa_half_range"] == 0).all()
    assert "±" in result.table_text()


def test_run_ablation_errors(tiny_arch, tiny_samples):
    hyper = TrainHyper(steps=1, batch=1, crop=64)
    with pytest.raises(DataError):
        run_ablation(tiny_samples, [], tiny_arch, hyper, seeds=[0])
    with pytest.raises(ConfigError):
        run_ablation(tiny_samples, tiny_samples[:1], tiny_arch, hyper, seeds=[0], variants=["fcn", "unet"])
