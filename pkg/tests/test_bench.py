import pytest

from mmsr.bench import BenchRow, bench_one, format_rows, run_bench


def test_rows_and_format():
    rows = run_bench(sizes=(1, 3), channels=(2,), hw=8, naive_rows=2, repeat=1)
    assert [(r.channels, r.size, r.hw) for r in rows] == [(2, 1, 8), (2, 3, 8)]
    assert all(r.naive_px_per_s > 0 and r.fast_px_per_s > 0 for r in rows)
    lines = format_rows(rows)
    assert lines[0] == "channels,size,hw,naive_px_per_s,fast_px_per_s,speedup"
    assert len(lines[1].split(",")) == 6


def test_speedup_property():
    assert BenchRow(1, 3, 8, 10.0, 55.0).speedup == 5.5


def test_fused_kernel_wins_at_size_eleven():
    assert bench_one(channels=16, size=11, hw=32, naive_rows=2, repeat=2).speedup > 1


@pytest.mark.xfail(strict=True, reason="size 1 is an exact identity in the fused path, the oracle is a Python loop")
def test_size_one_within_two_x():
    row = bench_one(channels=64, size=1, hw=64, naive_rows=2, repeat=2)
    assert 0.5 <= row.speedup <= 2
