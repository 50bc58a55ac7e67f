import struct

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from module.checkpoint import MAGIC, VERSION, file_digest, load_checkpoint, save_checkpoint
from module.network import build_variant
from utils.errors import CheckpointError, CheckpointVersionError, ConfigError
from utils.run_config import RunConfig

from tests.conftest import TINY_CONFIG_TEXT


@pytest.fixture
def tiny_rc():
    return RunConfig.from_text(TINY_CONFIG_TEXT)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_round_trip_is_bitwise(tmp_path, tiny_arch, tiny_rc, dtype):
    params = build_variant("lanet", tiny_arch, seed=9, dtype=dtype)
    path = tmp_path / "model.ckpt"
    digest = save_checkpoint(path, params, tiny_rc)
    assert digest == file_digest(path)

    loaded, rc = load_checkpoint(path)
    assert loaded.variant == "lanet"
    assert loaded.arch == tiny_arch
    assert loaded.names == params.names
    for name in params.names:
        assert loaded[name].dtype == dtype
        assert_array_equal(loaded[name].data, params[name].data)
    assert rc["variant"] == "lanet"
    assert rc.to_text() == tiny_rc.with_overrides({"variant": "lanet"}).to_text()


def test_same_parameters_give_same_digest(tmp_path, tiny_arch, tiny_rc):
    params = build_variant("fcn", tiny_arch, seed=1)
    a = save_checkpoint(tmp_path / "a.ckpt", params, tiny_rc)
    b = save_checkpoint(tmp_path / "b.ckpt", params, tiny_rc)
    assert a == b


def test_header_layout(tmp_path, tiny_arch, tiny_rc):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, build_variant("fcn", tiny_arch), tiny_rc)
    blob = path.read_bytes()
    assert blob[:8] == MAGIC
    assert struct.unpack("<I", blob[8:12]) == (VERSION,)


def test_version_mismatch_is_refused(tmp_path, tiny_arch, tiny_rc):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, build_variant("fcn", tiny_arch), tiny_rc)
    blob = bytearray(path.read_bytes())
    blob[8:12] = struct.pack("<I", VERSION + 1)
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointVersionError) as info:
        load_checkpoint(path)
    assert info.value.found == VERSION + 1


def test_corrupt_files_are_rejected(tmp_path, tiny_arch, tiny_rc):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, build_variant("fcn", tiny_arch), tiny_rc)
    blob = path.read_bytes()

    bad_magic = tmp_path / "magic.ckpt"
    bad_magic.write_bytes(b"NOTACKPT" + blob[8:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(bad_magic)

    truncated = tmp_path / "short.ckpt"
    truncated.write_bytes(blob[:-5])
    with pytest.raises(CheckpointError, match="截断"):
        load_checkpoint(truncated)

    trailing = tmp_path / "long.ckpt"
    trailing.write_bytes(blob + b"\x00")
    with pytest.raises(CheckpointError):
        load_checkpoint(trailing)

    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_variant_that_does_not_match_records_is_rejected(tmp_path, tiny_arch, tiny_rc):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, build_variant("fcn-low", tiny_arch), tiny_rc)
    blob = path.read_bytes()
    assert blob.count(b"fcn-low") == 1
    path.write_bytes(blob.replace(b"fcn-low", b"fcn-aem"))
    with pytest.raises(CheckpointError, match="变体"):
        load_checkpoint(path)


def test_arch_mismatch_on_save(tmp_path, tiny_arch):
    with pytest.raises(ConfigError):
        save_checkpoint(tmp_path / "m.ckpt", build_variant("fcn", tiny_arch), RunConfig.defaults())
