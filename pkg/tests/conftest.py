import os

import numpy as np
import pytest

from module.dataset import DatasetManifest, load_split, synth_generate
from module.network import ArchConfig

TINY_WIDTHS = (8, 16, 24, 32)

TINY_CONFIG_TEXT = """\
# 测试用的小网络
widths = 8,16,24,32
head_width = 16
steps = 2
batch = 1
crop = 64
tile = 64
overlap = 32
log_every = 1
seed = 0
"""


@pytest.fixture(scope="session", autouse=True)
def isolated_log_dir(tmp_path_factory):
    """所有日志写到临时目录，不污染项目 logs/"""
    log_dir = tmp_path_factory.mktemp("logs")
    old = os.environ.get("LANET_LOG_DIR")
    os.environ["LANET_LOG_DIR"] = str(log_dir)
    yield log_dir
    if old is None:
        os.environ.pop("LANET_LOG_DIR", None)
    else:
        os.environ["LANET_LOG_DIR"] = old


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_arch():
    return ArchConfig(in_channels=4, widths=TINY_WIDTHS, head_width=16)


@pytest.fixture
def tiny_config_file(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CONFIG_TEXT, encoding="utf-8")
    return path


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory) -> DatasetManifest:
    """5 个 64×64 场景：train 4 / val 0 / test 1"""
    root = tmp_path_factory.mktemp("tiny_data")
    return synth_generate(seed=7, count=5, out_dir=root, size=64, bands=4)


@pytest.fixture(scope="session")
def tiny_samples(tiny_dataset):
    return load_split(tiny_dataset, "train")
