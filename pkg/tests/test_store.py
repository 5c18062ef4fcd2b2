import json
import struct
import tracemalloc

import numpy as np
import pytest

from rtnq.bitpack import PackedTensor, unpack_tensor
from rtnq.errors import CorruptDataError, InvalidInputError, InvalidShapeError
from rtnq.manifest import MODULES, ModuleId, uniform_manifest
from rtnq.quant import KERNEL_INTERLEAVED, ROW_MAJOR, quantize_tensor
from rtnq.store import (
    ALIGN,
    MAGIC,
    FloatResidency,
    Model,
    load_model,
    load_quantized,
    quantize_model,
    read_checkpoint,
    save_model,
    sha256_file,
    write_checkpoint,
)
from rtnq.toy import ToyTransformerConfig, gen_synthetic_checkpoint, synthetic_model


def small_cfg(**kw):
    return ToyTransformerConfig(**{"layers": 3, "dim": 32, "heads": 2, "ffn": 64, "seq": 8, **kw})


class TestFloatCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path, toy_model):
        path = save_model(toy_model, tmp_path / "f.ckpt")
        back = load_model(path)
        assert back.manifest == toy_model.manifest
        for key, w in toy_model.weights.items():
            assert np.array_equal(back.weights[key].view(np.uint32), w.view(np.uint32))

    def test_layout_of_file(self, tmp_path, toy_ckpt):
        raw = toy_ckpt.read_bytes()
        assert raw[:8] == MAGIC
        (n,) = struct.unpack("<Q", raw[8:16])
        header = json.loads(raw[16 : 16 + n])
        assert len(header["tensors"]) == 32
        ckpt = read_checkpoint(toy_ckpt)
        assert ckpt.data_start % ALIGN == 0
        for rec in ckpt.records.values():
            assert rec.data_offset % ALIGN == 0 and rec.dtype == "f32"
        assert len(raw) % ALIGN == 0

    def test_gen_deterministic_and_seeded(self, tmp_path):
        cfg = small_cfg()
        a = gen_synthetic_checkpoint(cfg, 0, tmp_path / "a")
        b = gen_synthetic_checkpoint(cfg, 0, tmp_path / "b")
        c = gen_synthetic_checkpoint(cfg, 1, tmp_path / "c")
        assert sha256_file(a) == sha256_file(b) != sha256_file(c)
        wa, wc = load_model(a).weights, load_model(c).weights
        assert all(not np.array_equal(wa[k], wc[k]) for k in wa)

    def test_weight_statistics(self, toy_model):
        w = toy_model.weight(0, ModuleId.FFN_DOWN)
        assert w.shape == (64, 256)
        assert abs(float(w.std()) - 1 / 16) < 0.005

    def test_missing_tensor_rejected(self, tmp_path, toy_model):
        weights = dict(toy_model.weights)
        weights.pop((0, ModuleId.QKV))
        with pytest.raises(InvalidShapeError):
            write_checkpoint(toy_model.manifest, weights, tmp_path / "x")

    def test_wrong_shape_rejected(self, tmp_path):
        man = uniform_manifest(1, 4, 4)
        weights = {k: np.zeros((4, 4), np.float32) for k in man.keys()}
        weights[(0, ModuleId.FFN_UP)] = np.zeros((4, 5), np.float32)
        with pytest.raises(InvalidShapeError):
            write_checkpoint(man, weights, tmp_path / "x")


class TestCorruption:
    def test_bad_magic(self, tmp_path, toy_ckpt):
        p = tmp_path / "bad"
        p.write_bytes(b"XXXXXXXX" + toy_ckpt.read_bytes()[8:])
        with pytest.raises(CorruptDataError, match="magic"):
            read_checkpoint(p)

    def test_truncated_file(self, tmp_path, toy_ckpt):
        p = tmp_path / "trunc"
        p.write_bytes(toy_ckpt.read_bytes()[:-1000])
        with pytest.raises(CorruptDataError):
            read_checkpoint(p)

    def test_short_header(self, tmp_path):
        p = tmp_path / "tiny"
        p.write_bytes(MAGIC + b"\xff" * 8)
        with pytest.raises(CorruptDataError):
            read_checkpoint(p)

    def test_garbled_manifest(self, tmp_path, toy_ckpt):
        raw = bytearray(toy_ckpt.read_bytes())
        raw[16] = ord("#")
        p = tmp_path / "garbled"
        p.write_bytes(bytes(raw))
        with pytest.raises(CorruptDataError):
            read_checkpoint(p)

    def _rewrite_header(self, src, dst, edit):
        raw = src.read_bytes()
        (n,) = struct.unpack("<Q", raw[8:16])
        header = json.loads(raw[16 : 16 + n])
        edit(header)
        meta = json.dumps(header, sort_keys=True, indent=1).encode()
        start = -(-(16 + n) // ALIGN) * ALIGN
        new_start = -(-(16 + len(meta)) // ALIGN) * ALIGN
        prefix = MAGIC + struct.pack("<Q", len(meta)) + meta
        dst.write_bytes(prefix + b"\0" * (new_start - len(prefix)) + raw[start:])
        return dst

    def test_unknown_version(self, tmp_path, toy_ckpt):
        p = self._rewrite_header(toy_ckpt, tmp_path / "v", lambda h: h.update(format_version=99))
        with pytest.raises(CorruptDataError, match="version"):
            read_checkpoint(p)

    def test_blob_out_of_bounds(self, tmp_path, toy_ckpt):
        p = self._rewrite_header(toy_ckpt, tmp_path / "oob", lambda h: h["tensors"][3].update(data_offset=10**9))
        with pytest.raises(CorruptDataError, match="outside"):
            read_checkpoint(p)

    def test_missing_record(self, tmp_path, toy_ckpt):
        p = self._rewrite_header(toy_ckpt, tmp_path / "miss", lambda h: h["tensors"].pop())
        with pytest.raises(CorruptDataError):
            read_checkpoint(p)

    def test_unknown_dtype(self, tmp_path, toy_ckpt):
        p = self._rewrite_header(toy_ckpt, tmp_path / "dt", lambda h: h["tensors"][0].update(dtype="q3"))
        with pytest.raises(CorruptDataError):
            read_checkpoint(p)

    def test_wrong_blob_length(self, tmp_path, toy_ckpt):
        p = self._rewrite_header(toy_ckpt, tmp_path / "len", lambda h: h["tensors"][0].update(data_length=12))
        with pytest.raises(CorruptDataError):
            load_model(p)


class TestQuantizeOnLoad:
    def test_first_zero_is_per_tensor_rtn4(self, tmp_path, toy_ckpt, toy_model):
        m = load_quantized(toy_ckpt, "first:0")
        for key, w in toy_model.weights.items():
            q = quantize_tensor(w, 4, 128)
            got = unpack_tensor(m.weights[key])
            assert got.bits == 4
            np.testing.assert_array_equal(got.codes(), q.codes())
            np.testing.assert_array_equal(got.scales, q.scales)

    def test_all_layers_all_modules_is_rtn8(self, toy_ckpt):
        m = load_quantized(toy_ckpt, "first:8 modules:all")
        assert {w.bits for w in m.weights.values()} == {8}
        assert m.effective_bits() == 8.0

    def test_manifest_records_plan(self, toy_ckpt):
        m = load_quantized(toy_ckpt, "modules:1+3+4 first:1", group=64)
        assert m.manifest.plan == "first:1 modules:1+3+4 base:4 high:8"
        assert m.manifest.group == 64 and m.manifest.layout == KERNEL_INTERLEAVED

    def test_matches_in_memory_quantization(self, toy_ckpt, toy_model):
        a = load_quantized(toy_ckpt, "last:3 modules:2")
        b = quantize_model(toy_model, "last:3 modules:2")
        assert a.manifest == b.manifest
        assert all(a.weights[k] == b.weights[k] for k in a.weights)

    def test_refuses_quantized_input(self, tmp_path, toy_ckpt):
        q = save_model(load_quantized(toy_ckpt, "first:0"), tmp_path / "q")
        with pytest.raises(InvalidInputError):
            load_quantized(q, "first:0")

    def test_group_must_divide(self, tmp_path):
        p = gen_synthetic_checkpoint(small_cfg(ffn=48), 0, tmp_path / "f")
        with pytest.raises(InvalidShapeError):
            load_quantized(p, "first:0", group=32)
        m = load_quantized(p, "first:0", group=32, allow_remainder=True)
        assert m.weight(0, ModuleId.FFN_DOWN).scales.shape == (32, 2)

    def test_one_float_tensor_resident_at_a_time(self, toy_ckpt):
        res = FloatResidency()
        load_quantized(toy_ckpt, "first:1", residency=res)
        largest = max(r.rows * r.cols * 4 for r in read_checkpoint(toy_ckpt).records.values())
        assert res.peak == largest and res.current == 0

    def test_streaming_peak_memory(self, tmp_path):
        # Peak allocation grows with the packed output, not with the float
        # model: tripling the depth adds far less than the extra float bytes.
        def measure(layers):
            cfg = ToyTransformerConfig(layers=layers, dim=128, heads=4, ffn=512, seq=8)
            p = gen_synthetic_checkpoint(cfg, 0, tmp_path / f"n{layers}")
            full = sum(r.rows * r.cols * 4 for r in read_checkpoint(p).records.values())
            tracemalloc.start()
            load_quantized(p, "first:0")
            _, peak = tracemalloc.get_traced_memory()
            tracemalloc.stop()
            return full, peak

        full_a, peak_a = measure(4)
        full_b, peak_b = measure(12)
        assert peak_b - peak_a < 0.25 * (full_b - full_a)


class TestQuantizedCheckpoint:
    @pytest.mark.parametrize("layout", [KERNEL_INTERLEAVED, ROW_MAJOR])
    def test_double_roundtrip(self, tmp_path, toy_model, layout):
        m = quantize_model(toy_model, "middle:2 modules:1+4", group=32, layout=layout)
        p1 = save_model(m, tmp_path / "a")
        back = load_model(p1)
        p2 = save_model(back, tmp_path / "b")
        again = load_model(p2)
        assert p1.read_bytes() == p2.read_bytes()
        for key in m.manifest.keys():
            assert isinstance(again.weights[key], PackedTensor)
            assert again.weights[key] == back.weights[key]
            np.testing.assert_array_equal(unpack_tensor(back.weights[key]).codes(),
                                          unpack_tensor(m.weights[key]).codes())
        assert again.assignment.bits == m.assignment.bits
        assert str(again.assignment.plan) == str(m.assignment.plan)

    def test_scales_survive_half_precision(self, tmp_path, toy_model):
        m = quantize_model(toy_model, "first:0", group=64)
        back = load_model(save_model(m, tmp_path / "q"))
        for key in m.manifest.keys():
            np.testing.assert_array_equal(back.weights[key].scales,
                                          m.weights[key].scales.astype(np.float16).astype(np.float32))

    def test_unrepresentable_scale(self, tmp_path):
        man = uniform_manifest(1, 2, 4)
        weights = {k: np.full((2, 4), 1e6, np.float32) for k in man.keys()}
        m = quantize_model(Model(man, weights), "first:0", group=4)
        with pytest.raises(InvalidInputError, match="float16"):
            save_model(m, tmp_path / "x")

    def test_inspectable_bits(self, tmp_path, toy_model):
        m = quantize_model(toy_model, "first:1 modules:1+3+4")
        ckpt = read_checkpoint(save_model(m, tmp_path / "q"))
        dtypes = {k: r.dtype for k, r in ckpt.records.items()}
        assert [dtypes[(0, mod)] for mod in MODULES] == ["q8", "q4", "q8", "q8"]
        assert sum(d == "q4" for d in dtypes.values()) == 29
