import json
import threading

import numpy as np
import pytest

from htscluster import __version__
from htscluster.runs import (
    atomic_write_json,
    atomic_write_text,
    build_manifest,
    derive_seed,
    dumps_canonical,
    make_rng,
    parallel_map,
)


def test_streams_are_independent_and_stable():
    seeds = {derive_seed(0, s) for s in ("simulate", "init", "forecast", "repeat")}
    assert len(seeds) == 4
    assert derive_seed(5, "init", 2) == derive_seed(5, "init", 2)
    assert derive_seed(5, "init", 2) != derive_seed(6, "init", 2)


def test_trailing_zero_indices_give_new_streams():
    assert derive_seed(1, "init", 3) != derive_seed(1, "init", 3, 0)
    assert derive_seed(1, "init") != derive_seed(1, "init", 0)


def test_make_rng_reproduces_draws():
    assert np.array_equal(make_rng(3, "simulate", 1).normal(size=5), make_rng(3, "simulate", 1).normal(size=5))


def test_canonical_dump_sorts_keys_and_rejects_nan():
    text = dumps_canonical({"b": np.float64(0.1), "a": np.arange(2)})
    assert text.index('"a"') < text.index('"b"')
    assert json.loads(text) == {"a": [0, 1], "b": 0.1}
    with pytest.raises(ValueError):
        dumps_canonical({"x": float("nan")})


def test_manifest_hash_covers_the_body():
    m = build_manifest("cluster", {"k": 2}, 0, {"dataset": "abc"})
    assert m["version"] == __version__
    assert build_manifest("cluster", {"k": 2}, 0, {"dataset": "abc"})["hash"] == m["hash"]
    assert build_manifest("cluster", {"k": 3}, 0, {"dataset": "abc"})["hash"] != m["hash"]
    assert build_manifest("cluster", {"k": 2}, 1, {"dataset": "abc"})["hash"] != m["hash"]


def test_atomic_writes_leave_only_the_target(tmp_path):
    path = atomic_write_text(tmp_path / "sub" / "out.txt", "hello\n")
    assert path.read_text() == "hello\n"
    atomic_write_json(path, {"x": 1})
    assert json.loads(path.read_text()) == {"x": 1}
    assert sorted(p.name for p in path.parent.iterdir()) == ["out.txt"]


def test_failed_write_keeps_the_old_file(tmp_path):
    path = atomic_write_text(tmp_path / "out.json", "{}\n")
    with pytest.raises(ValueError):
        atomic_write_json(path, {"x": float("inf")})
    assert path.read_text() == "{}\n"
    assert [p.name for p in tmp_path.iterdir()] == ["out.json"]


def test_parallel_map_keeps_order():
    seen = set()

    def work(i):
        seen.add(threading.get_ident())
        return i * i

    assert parallel_map(work, range(50), threads=4) == [i * i for i in range(50)]
    assert parallel_map(work, range(5), threads=1) == [0, 1, 4, 9, 16]
    assert parallel_map(work, [], threads=4) == []
