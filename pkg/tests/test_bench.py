import csv
import io
import json
from pathlib import Path

import pytest

from dehazekit import oracles
from dehazekit.bench import COLUMNS, bench_cache, default_schedule, load_schedule, to_csv
from dehazekit.config import ModelConfig

GOLDEN = Path(__file__).resolve().parent.parent / "docs" / "golden"


def test_recurrence_and_reduction():
    res, c_a = default_schedule()
    rows = bench_cache(ModelConfig(), res, c_a)
    on = [r.cache_len_on for r in rows]
    assert on == oracles.cache_length_recurrence(20, 64, 0.5)
    assert on[-1] <= 128 and rows[-1].cache_len_off == 1280
    assert 1 - on[-1] / rows[-1].cache_len_off >= 0.9


def test_haze_free_schedule_only_caps():
    cfg = ModelConfig(max_cache_len=300)
    rows = bench_cache(cfg, [(64, 64)] * 10, [0.0] * 10)
    assert all(r.cache_len_on == min(r.cache_len_off, 300) for r in rows)
    assert all(r.gamma == 1.0 for r in rows)


def test_bytes_identity_and_ordering():
    res = [(64, 64)] * 4 + [(128, 96)] * 4 + [(32, 32)] * 4
    rows = bench_cache(ModelConfig(), res, [1.0, 0.2, 0.6, 0.9] * 3, dim=12)
    evicted = False
    for r in rows:
        assert r.bytes_on == r.cache_len_on * 12 * 4 * 2
        assert r.bytes_off == r.cache_len_off * 12 * 4 * 2
        assert r.bytes_on <= r.bytes_off
        evicted |= r.gamma < 1 and r.step > 1
        if evicted:
            assert r.bytes_on < r.bytes_off


def test_csv_schema_matches_golden():
    text = to_csv(bench_cache(ModelConfig(), [(64, 64)] * 5, [1.0] * 5))
    got = list(csv.DictReader(io.StringIO(text)))
    want = list(csv.DictReader(io.StringIO((GOLDEN / "bench_cache.csv").read_text())))
    assert tuple(got[0]) == COLUMNS
    strip = lambda rows: [{k: v for k, v in r.items() if k != "ms"} for r in rows]  # noqa: E731
    assert strip(got) == strip(want)


def test_load_schedule(tmp_path):
    res, c_a = load_schedule(GOLDEN / "schedule.json")
    assert len(res) == len(c_a) == 5 and res[3] == (128, 96)
    (tmp_path / "s.json").write_text(json.dumps({"resolutions": [[8, 8]], "c_a": [0.1, 0.2]}))
    with pytest.raises(ValueError):
        load_schedule(tmp_path / "s.json")
