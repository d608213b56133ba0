import pathlib
import struct
import tempfile

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from famednet import files
from famednet.network import NetConfig, build_network


class TestImages:
    @pytest.mark.parametrize("ext", [".png", ".ppm"])
    def test_round_trip_within_quantization(self, tmp_path, rng, ext):
        img = rng.random((3, 9, 14))
        files.save_image(img, tmp_path / f"a{ext}")
        back = files.load_image(tmp_path / f"a{ext}")
        assert back.shape == (3, 9, 14) and back.dtype == np.float32
        assert np.max(np.abs(back - img)) <= 1 / 510 + 1e-7

    def test_load_save_load_is_idempotent(self, tmp_path, rng):
        files.save_image(rng.random((3, 5, 5)), tmp_path / "a.png")
        first = files.load_image(tmp_path / "a.png")
        files.save_image(first, tmp_path / "b.png")
        np.testing.assert_array_equal(files.load_image(tmp_path / "b.png"), first)

    def test_white_ppm(self, tmp_path):
        p = tmp_path / "w.ppm"
        p.write_bytes(b"P6 1 1 255\n\xff\xff\xff")
        np.testing.assert_array_equal(files.load_image(p), np.ones((3, 1, 1), np.float32))

    def test_rounds_half_away_from_zero(self):
        assert files.to_uint8(np.full((3, 1, 1), 0.5 / 255))[0, 0, 0] == 1
        assert files.to_uint8(np.full((3, 1, 1), 1.49 / 255))[0, 0, 0] == 1

    def test_bad_magic_names_the_path(self, tmp_path):
        p = tmp_path / "broken.png"
        p.write_bytes(b"XXXX not an image")
        with pytest.raises(files.ImageFormatError, match="broken.png"):
            files.load_image(p)

    def test_truncated_png(self, tmp_path, rng):
        p = tmp_path / "t.png"
        files.save_image(rng.random((3, 32, 32)), p)
        p.write_bytes(p.read_bytes()[:60])
        with pytest.raises(files.ImageFormatError, match="t.png"):
            files.load_image(p)

    def test_jpeg_extension_rejected(self, tmp_path):
        with pytest.raises(files.ImageFormatError, match="extension"):
            files.save_image(np.zeros((3, 2, 2)), tmp_path / "x.jpg")

    def test_list_images_sorted_and_filtered(self, tmp_path):
        for n in ("b.png", "a.ppm", "c.txt"):
            (tmp_path / n).write_bytes(b"")
        assert [p.name for p in files.list_images(tmp_path)] == ["a.ppm", "b.png"]


@pytest.fixture
def ss_net():
    return build_network(NetConfig.single_scale(feature_dim=32), seed=4)


class TestWeights:
    def test_save_load_save_is_byte_identical(self, tmp_path, ss_net):
        files.save_weights(ss_net, tmp_path / "a.fmdn")
        net = files.load_weights(tmp_path / "a.fmdn")
        files.save_weights(net, tmp_path / "b.fmdn")
        assert (tmp_path / "a.fmdn").read_bytes() == (tmp_path / "b.fmdn").read_bytes()
        assert net.config == ss_net.config

    def test_stored_value_counts(self, tmp_path, ss_net):
        files.save_weights(ss_net, tmp_path / "a.fmdn")
        _, entries = files.read_weight_file(tmp_path / "a.fmdn")
        assert sum(a.size for _, a, l in entries if l) == 5987
        assert sum(a.size for _, a, l in entries if not l) == 256

    def test_values_little_endian_float32(self, tmp_path, ss_net):
        data = files.encode_weights(ss_net)
        first = ss_net.weights["s0.block1.conv.weight"].value.ravel()
        tail = 4 * sum(p.value.size for p in ss_net.weights.values())
        start = len(data) - tail
        assert struct.unpack_from("<3f", data, start) == tuple(first[:3].astype(np.float32))

    def test_mismatched_config_names_first_tensor(self, tmp_path, ss_net):
        files.save_weights(ss_net, tmp_path / "a.fmdn")
        other = build_network(NetConfig.single_scale(feature_dim=16))
        with pytest.raises(files.WeightFileError, match="s0.block1.conv.weight"):
            files.load_weights(tmp_path / "a.fmdn", into=other)

    def test_version_rejected(self, tmp_path, ss_net):
        data = bytearray(files.encode_weights(ss_net))
        data[4:8] = struct.pack("<I", 99)
        (tmp_path / "v.fmdn").write_bytes(bytes(data))
        with pytest.raises(files.WeightFileError, match="version 99"):
            files.load_weights(tmp_path / "v.fmdn")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "m.fmdn").write_bytes(b"NOPE" + bytes(40))
        with pytest.raises(files.WeightFileError, match="magic"):
            files.read_weight_file(tmp_path / "m.fmdn")

    def test_inconsistent_offset(self, tmp_path):
        net = build_network(NetConfig.single_scale(feature_dim=4))
        data = bytearray(files.encode_weights(net))
        # the first directory entry's offset field is 0; bump it
        name = b"s0.block1.conv.weight"
        at = data.index(name) + len(name) + 1 + 2 * 4
        assert struct.unpack_from("<Q", data, at)[0] == 0
        struct.pack_into("<Q", data, at, 4)
        (tmp_path / "o.fmdn").write_bytes(bytes(data))
        with pytest.raises(files.WeightFileError, match="offset"):
            files.read_weight_file(tmp_path / "o.fmdn")

    @settings(max_examples=15)
    @given(st.integers(1, 400))
    def test_truncation_always_rejected(self, cut):
        data = files.encode_weights(build_network(NetConfig.single_scale(feature_dim=4)))
        with tempfile.TemporaryDirectory() as d:
            p = pathlib.Path(d) / "cut.fmdn"
            p.write_bytes(data[:-cut])
            with pytest.raises(files.WeightFileError):
                files.read_weight_file(p)


class TestAtomicWrite:
    def test_failed_write_leaves_target_untouched(self, tmp_path, monkeypatch):
        target = tmp_path / "ckpt.fmdn"
        target.write_bytes(b"old")

        def boom(*a):
            raise OSError("disk full")

        monkeypatch.setattr(files.os, "replace", boom)
        with pytest.raises(OSError):
            files.atomic_write_bytes(target, b"new contents")
        assert target.read_bytes() == b"old"
        assert [p.name for p in tmp_path.iterdir()] == ["ckpt.fmdn"]
