import numpy as np
import pytest

from toolnet import checkpoint
from toolnet.arch import build_network, desk_config
from toolnet.checkpoint import CheckpointError


@pytest.mark.parametrize("arch", ["toolnet-ms", "toolnet-h", "baseline"])
def test_save_load_save_is_byte_identical(tmp_path, rng, arch):
    net = build_network(arch, desk_config(arch), seed=3)
    for p in net.params.values():
        p.data += rng.normal(size=p.shape)
    checkpoint.save(net, tmp_path / "a.tnck", (0.5, 0.25, 0.125))
    net2, means = checkpoint.load(tmp_path / "a.tnck")
    checkpoint.save(net2, tmp_path / "b.tnck", means)
    assert (tmp_path / "a.tnck").read_bytes() == (tmp_path / "b.tnck").read_bytes()
    assert means == (0.5, 0.25, 0.125)
    assert net2.arch == arch and net2.cfg == net.cfg
    for name, p in net.params.items():
        np.testing.assert_array_equal(net2.params[name].data, p.data.astype(np.float32))


def test_layout_header(tmp_path):
    data = checkpoint.to_bytes(build_network("toolnet-ms"))
    assert data[:4] == b"TNCK"
    assert int.from_bytes(data[4:8], "little") == 1


def test_float32_load(tmp_path):
    checkpoint.save(build_network("toolnet-h"), tmp_path / "c.tnck")
    net, _ = checkpoint.load(tmp_path / "c.tnck", dtype=np.float32)
    assert all(p.data.dtype == np.float32 for p in net.params.values())


def test_bad_magic(tmp_path):
    (tmp_path / "x.tnck").write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(CheckpointError, match="x.tnck"):
        checkpoint.load(tmp_path / "x.tnck")


def test_truncated(tmp_path):
    data = checkpoint.to_bytes(build_network("toolnet-ms"))
    with pytest.raises(CheckpointError):
        checkpoint.from_bytes(data[: len(data) // 2])


def test_future_version():
    data = bytearray(checkpoint.to_bytes(build_network("toolnet-ms")))
    data[4:8] = (99).to_bytes(4, "little")
    with pytest.raises(CheckpointError, match="version"):
        checkpoint.from_bytes(bytes(data))
