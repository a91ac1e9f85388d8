"""Binary format and configuration tests.

The format tests treat the files as black boxes where possible (round-trips)
and corrupt specific header fields where the contract names the failure:
bad magic, unknown version, truncation, trailing garbage."""

import numpy as np
import pytest

from dlka import (
    FileFormatError,
    NetConfig,
    ValidationError,
    build_net,
    checkpoint_load,
    checkpoint_save,
    config_dump,
    config_parse,
    read_raster,
    write_raster,
)
from dlka.config import net_config_from, synth_dims, train_settings_from

SMALL_2D = dict(rank=2, base_channels=8, K=5, d=2)


class TestRasterFormat:
    def test_f8_round_trip_bit_exact(self, tmp_path):
        arr = np.random.default_rng(0).normal(size=(2, 3, 16, 12))
        p = tmp_path / "x.dlkv"
        write_raster(p, arr)
        back = read_raster(p)
        assert back.dtype == np.float64
        assert np.array_equal(back, arr)

    def test_f4_round_trip(self, tmp_path):
        arr = np.random.default_rng(1).normal(size=(1, 1, 8, 8)).astype(np.float32)
        p = tmp_path / "x.dlkv"
        write_raster(p, arr)
        back = read_raster(p)
        assert back.dtype == np.float32
        assert np.array_equal(back, arr)

    def test_u8_labels_3d_round_trip(self, tmp_path):
        arr = np.random.default_rng(2).integers(0, 5, size=(1, 1, 8, 8, 4)).astype(np.uint8)
        p = tmp_path / "labels.dlkv"
        write_raster(p, arr)
        back = read_raster(p)
        assert back.dtype == np.uint8
        assert np.array_equal(back, arr)

    def test_rejects_wrong_ndim(self, tmp_path):
        with pytest.raises(FileFormatError):
            write_raster(tmp_path / "x.dlkv", np.zeros((4, 4)))
        with pytest.raises(FileFormatError):
            write_raster(tmp_path / "x.dlkv", np.zeros((1, 1, 2, 2, 2, 2)))

    def test_rejects_unsupported_dtype(self, tmp_path):
        with pytest.raises(FileFormatError):
            write_raster(tmp_path / "x.dlkv", np.zeros((1, 1, 4, 4), dtype=np.int64))

    def _valid_bytes(self, tmp_path):
        p = tmp_path / "x.dlkv"
        write_raster(p, np.random.default_rng(3).normal(size=(1, 2, 4, 4)))
        return p, bytearray(p.read_bytes())

    def test_bad_magic_rejected(self, tmp_path):
        p, blob = self._valid_bytes(tmp_path)
        blob[:4] = b"NOPE"
        p.write_bytes(blob)
        with pytest.raises(FileFormatError, match="magic"):
            read_raster(p)

    def test_unknown_version_rejected(self, tmp_path):
        p, blob = self._valid_bytes(tmp_path)
        blob[4:6] = (999).to_bytes(2, "little")
        p.write_bytes(blob)
        with pytest.raises(FileFormatError, match="version"):
            read_raster(p)

    def test_unknown_dtype_code_rejected(self, tmp_path):
        p, blob = self._valid_bytes(tmp_path)
        blob[6] = 7
        p.write_bytes(blob)
        with pytest.raises(FileFormatError, match="dtype"):
            read_raster(p)

    def test_bad_rank_rejected(self, tmp_path):
        p, blob = self._valid_bytes(tmp_path)
        blob[7] = 9
        p.write_bytes(blob)
        with pytest.raises(FileFormatError, match="rank"):
            read_raster(p)

    def test_truncation_rejected(self, tmp_path):
        p, blob = self._valid_bytes(tmp_path)
        p.write_bytes(blob[:-1])
        with pytest.raises(FileFormatError, match="truncated"):
            read_raster(p)

    def test_trailing_garbage_rejected(self, tmp_path):
        p, blob = self._valid_bytes(tmp_path)
        p.write_bytes(bytes(blob) + b"\x00")
        with pytest.raises(FileFormatError, match="trailing"):
            read_raster(p)


class TestCheckpointFormat:
    def _net_state(self, seed=0):
        net = build_net(NetConfig(**SMALL_2D), seed=seed)
        return net, list((n, p.data) for n, p in net.named_parameters())

    def test_round_trip_bit_exact_with_verbatim_config(self, tmp_path):
        net, named = self._net_state()
        cfg_text = "[net]\nrank = 2\n# commentaire unicode: café ☕\n"
        p = tmp_path / "ckpt.dlkc"
        checkpoint_save(p, named, cfg_text)
        text, tensors = checkpoint_load(p)
        assert text == cfg_text
        assert list(tensors) == [n for n, _ in named]  # order preserved
        for name, arr in named:
            assert np.array_equal(tensors[name], arr), name

    def test_save_load_save_byte_identical(self, tmp_path):
        _, named = self._net_state(seed=4)
        p1 = tmp_path / "a.dlkc"
        p2 = tmp_path / "b.dlkc"
        checkpoint_save(p1, named, "[net]\nrank = 2\n")
        text, tensors = checkpoint_load(p1)
        checkpoint_save(p2, list(tensors.items()), text)
        assert p1.read_bytes() == p2.read_bytes()

    def test_zero_parameter_checkpoint(self, tmp_path):
        p = tmp_path / "empty.dlkc"
        checkpoint_save(p, [], "config only\n")
        text, tensors = checkpoint_load(p)
        assert text == "config only\n"
        assert tensors == {}

    def test_scalar_and_f4_tensors(self, tmp_path):
        named = [
            ("scalar", np.array(3.5)),
            ("single", np.float32(2.0) * np.ones((2, 3), dtype=np.float32)),
        ]
        p = tmp_path / "mixed.dlkc"
        checkpoint_save(p, named, "")
        _, tensors = checkpoint_load(p)
        assert tensors["scalar"].shape == ()
        assert tensors["scalar"] == 3.5
        assert tensors["single"].dtype == np.float32

    def test_u8_tensor_rejected_on_save(self, tmp_path):
        with pytest.raises(FileFormatError):
            checkpoint_save(tmp_path / "x.dlkc", [("a", np.zeros(3, np.uint8))], "")

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "x.dlkc"
        checkpoint_save(p, [("a", np.ones(2))], "")
        blob = bytearray(p.read_bytes())
        blob[:4] = b"JUNK"
        p.write_bytes(blob)
        with pytest.raises(FileFormatError, match="magic"):
            checkpoint_load(p)

    def test_truncation_rejected(self, tmp_path):
        p = tmp_path / "x.dlkc"
        checkpoint_save(p, [("a", np.ones(4))], "cfg")
        blob = p.read_bytes()
        for cut in (len(blob) - 1, len(blob) - 9, 10):
            p.write_bytes(blob[:cut])
            with pytest.raises(FileFormatError):
                checkpoint_load(p)

    def test_trailing_garbage_rejected(self, tmp_path):
        p = tmp_path / "x.dlkc"
        checkpoint_save(p, [("a", np.ones(2))], "cfg")
        p.write_bytes(p.read_bytes() + b"zz")
        with pytest.raises(FileFormatError, match="trailing"):
            checkpoint_load(p)

    def test_duplicate_tensor_name_rejected(self, tmp_path):
        p = tmp_path / "x.dlkc"
        checkpoint_save(p, [("a", np.ones(2)), ("a", np.zeros(2))], "")
        with pytest.raises(FileFormatError, match="duplicate"):
            checkpoint_load(p)

    def test_restores_network_state(self, tmp_path):
        from dlka import Tensor

        net, named = self._net_state(seed=6)
        x = Tensor(np.random.default_rng(7).normal(size=(1, 1, 64, 64)))
        y0 = net(x).data.copy()
        p = tmp_path / "net.dlkc"
        checkpoint_save(p, named, "")
        for _, param in net.named_parameters():
            param.data = param.data + 0.5
        assert not np.allclose(net(x).data, y0)
        _, tensors = checkpoint_load(p)
        net.load_state(tensors)
        assert np.array_equal(net(x).data, y0)

    def test_error_subclassing(self):
        assert issubclass(FileFormatError, ValidationError)


class TestConfigParse:
    def test_empty_text_gives_defaults(self):
        values = config_parse("")
        cfg = net_config_from(values)
        assert cfg == NetConfig()
        assert (cfg.rank, cfg.K, cfg.d, cfg.deformable) == (3, 21, 3, True)
        st = train_settings_from(values)
        assert st.epochs == 10 and st.seed == 0 and st.lr is None

    def test_k13_gives_dwd_kernel_5(self):
        values = config_parse("lka.K = 13\nnet.rank = 2\n")
        cfg = net_config_from(values)
        assert cfg.K == 13
        assert cfg.lka(cfg.base_channels).dwd_kernel == 5  # ceil(13 / 3)

    def test_d_zero_rejected_at_config_use(self):
        values = config_parse("lka.d = 0\nnet.rank = 2\n")
        cfg = net_config_from(values)
        with pytest.raises(ValidationError):
            cfg.lka(cfg.base_channels)

    def test_sections_and_dotted_keys_equivalent(self):
        a = config_parse("[lka]\nK = 9\nd = 2\n")
        b = config_parse("lka.K = 9\nlka.d = 2\n")
        assert a == b

    def test_comments_and_blank_lines_ignored(self):
        values = config_parse("# leading comment\n\n[net]\nrank = 2  # trailing\n")
        assert values["net.rank"] == 2

    def test_unknown_key_named_in_error(self):
        with pytest.raises(ValidationError, match="net.bogus"):
            config_parse("net.bogus = 3\n")

    def test_unknown_section_rejected(self):
        with pytest.raises(ValidationError, match="mystery"):
            config_parse("[mystery]\nx = 1\n")

    def test_type_mismatch_reported(self):
        with pytest.raises(ValidationError, match="lka.K"):
            config_parse("lka.K = soon\n")
        with pytest.raises(ValidationError, match="deformable"):
            config_parse("lka.deformable = yes\n")

    def test_bare_key_without_section_rejected(self):
        with pytest.raises(ValidationError, match="before any"):
            config_parse("rank = 2\n")

    def test_missing_equals_rejected(self):
        with pytest.raises(ValidationError, match="key = value"):
            config_parse("[net]\nrank 2\n")

    def test_bool_and_optional_values(self):
        values = config_parse("lka.deformable = false\nnet.skip_count = 2\n")
        assert values["lka.deformable"] is False
        cfg = net_config_from(values)
        assert cfg.deformable is False and cfg.skip_count == 2

    def test_dims_parsing(self):
        values = config_parse("synth.dims = 64, 32\nnet.rank = 2\n")
        assert synth_dims(values) == (64, 32)

    def test_dims_default_per_rank(self):
        assert synth_dims(config_parse("net.rank = 2\n")) == (64, 64)
        assert synth_dims(config_parse("")) == (32, 32, 16)

    def test_dims_rank_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            synth_dims(config_parse("synth.dims = 8,8,8\nnet.rank = 2\n"))

    def test_dump_round_trips_values(self):
        text = "net.rank = 2\nlka.K = 13\ntrain.lr = 0.125\nlka.deformable = false\n"
        values = config_parse(text)
        dumped = config_dump(values)
        assert config_parse(dumped) == values

    def test_dump_round_trips_float_bits(self):
        values = config_parse("train.lr = 0.1\n")  # 0.1 is not dyadic
        reparsed = config_parse(config_dump(values))
        assert reparsed["train.lr"] == values["train.lr"]
