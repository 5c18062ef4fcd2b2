import numpy as np
import pytest

from rtnq.bench import (
    CSV_FIELDS,
    BenchRecord,
    _SpotChecker,
    bench_sweep,
    find_crossover,
    manifest_shapes,
    read_records_csv,
    records_csv,
)
from rtnq.errors import InsufficientDataError
from rtnq.quant import quantize_tensor
from rtnq.toy import PRESETS, manifest_for_config


def synthetic(shape_flips, m_values=(1, 16, 64, 128, 256, 1024)):
    """Records where dequant beats fused from ``flip`` on (None: never)."""
    out = []
    for (k, n), flip in shape_flips.items():
        for m in m_values:
            fused = 1000 + m
            deq = fused - 1 if flip is not None and m >= flip else fused + 500
            out += [
                BenchRecord("fused", m, k, n, 4, 20, fused, 2.0),
                BenchRecord("dequant", m, k, n, 4, 20, deq, 2.0),
                BenchRecord("baseline", m, k, n, 4, 20, 2000, 1.0),
            ]
    return out


class TestCrossover:
    def test_fused_always_faster(self):
        c = find_crossover(synthetic({(64, 64): None}))
        assert c.per_shape == {(64, 64, 4): None} and c.recommended is None

    def test_forced_flip(self):
        assert find_crossover(synthetic({(64, 64): 128})).recommended == 128

    def test_recommended_is_median(self):
        c = find_crossover(synthetic({(64, 64): 16, (64, 128): 128, (128, 64): 1024, (8, 8): None}))
        assert c.per_shape[(8, 8, 4)] is None
        assert c.recommended == 128

    def test_tie_counts_as_crossover(self):
        recs = synthetic({(4, 4): None})
        recs = [BenchRecord(r.path, r.m, r.k, r.n, r.bits, r.reps, 1001 if r.m == 1 and r.path != "baseline"
                            else r.median_ns, r.speedup) for r in recs]
        assert find_crossover(recs).recommended == 1

    def test_insufficient_data(self):
        with pytest.raises(InsufficientDataError):
            find_crossover([])
        with pytest.raises(InsufficientDataError):
            find_crossover(synthetic({(64, 64): 1}, m_values=(16,)))
        with pytest.raises(InsufficientDataError):
            find_crossover([r for r in synthetic({(64, 64): 1}) if r.path != "dequant"])

    def test_pure(self):
        recs = synthetic({(64, 64): 64, (32, 32): 256})
        assert find_crossover(recs) == find_crossover(list(reversed(recs)))


class TestSweep:
    def test_counts_and_schema(self):
        shapes = [(64, 32), (128, 16)]
        ms = [1, 4, 33]
        recs = bench_sweep(shapes, ms, bits=4, reps=3, warmup=1, group=32)
        assert len(recs) == len(shapes) * len(ms) * 3
        assert all(r.median_ns > 0 and r.reps == 3 for r in recs)
        assert [r.path for r in recs[:3]] == ["fused", "dequant", "baseline"]
        assert all(r.speedup == 1.0 for r in recs if r.path == "baseline")

    def test_remainder_shapes_allowed(self):
        recs = bench_sweep([(100, 8)], [1, 2], bits=8, reps=1, warmup=0, group=32)
        assert len(recs) == 6

    def test_unsorted_m_rejected(self):
        with pytest.raises(ValueError):
            bench_sweep([(8, 8)], [4, 1])
        with pytest.raises(ValueError):
            bench_sweep([], [1])

    def test_spot_checker_runs_on_one_percent(self):
        chk = _SpotChecker()
        bench_sweep([(16, 8)], [1, 2], reps=100, warmup=0, group=16, checker=chk)
        # 2 m values x 2 quantized paths x 100 timed calls
        assert chk.calls == 400 and chk.checked == 4

    def test_spot_checker_catches_wrong_output(self, rng):
        q = quantize_tensor(rng.standard_normal((4, 8)).astype(np.float32), 4, 8)
        a = rng.standard_normal((2, 8)).astype(np.float32)
        with pytest.raises(AssertionError):
            _SpotChecker(every=1)(np.zeros((2, 4), np.float32) + 1, a, q)

    def test_manifest_shapes(self):
        assert manifest_shapes(manifest_for_config(PRESETS["toy"])) == [(64, 192), (64, 64), (64, 512), (256, 64)]


class TestCsv:
    def test_roundtrip_and_header(self):
        recs = synthetic({(64, 64): 128})
        text = records_csv(recs, threads=1, threshold=512, revision="abc123")
        lines = text.splitlines()
        assert lines[:3] == ["# threads=1", "# git_revision=abc123", "# threshold=512"]
        assert lines[3] == ",".join(CSV_FIELDS)
        meta, back = read_records_csv(text)
        assert meta == {"threads": "1", "git_revision": "abc123", "threshold": "512"}
        assert back == recs

    def test_real_records_roundtrip(self):
        recs = bench_sweep([(32, 16)], [1, 8], reps=2, warmup=0, group=32)
        assert read_records_csv(records_csv(recs, threads=1))[1] == recs

    @pytest.mark.parametrize("bad", ["path,m\nfused,1\n", ",".join(CSV_FIELDS) + "\nwarp,1,1,1,4,20,5,1.0\n",
                                     ",".join(CSV_FIELDS) + "\nfused,1,1,1,4,20,0,1.0\n"])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            read_records_csv(bad)
