import json
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from decoupled_ann.errors import MalformedRecordError
from decoupled_ann.harness import cli
from decoupled_ann.harness.datasets import read_vecs, synthetic_mixture, write_vecs
from decoupled_ann.harness.groundtruth import brute_force_knn, recall_at_k
from decoupled_ann.harness.workload import ConfigError, WorkloadConfig, recall_from_dump, run_workload


def test_read_single_fvecs_record(tmp_path):
    p = tmp_path / "one.fvecs"
    p.write_bytes(struct.pack("<i3f", 3, 1.0, 2.5, -4.0))
    x = read_vecs(p)
    assert x.dtype == np.float32 and x.tolist() == [[1.0, 2.5, -4.0]]


def test_truncated_and_inconsistent_files(tmp_path):
    p = tmp_path / "bad.fvecs"
    p.write_bytes(struct.pack("<i3f", 3, 1, 2, 3) + struct.pack("<i2f", 3, 1, 2))
    with pytest.raises(MalformedRecordError):
        read_vecs(p)
    p.write_bytes(struct.pack("<i2f", 2, 1, 2) + struct.pack("<i2f", 3, 1, 2))
    with pytest.raises(MalformedRecordError):
        read_vecs(p)
    p.write_bytes(b"\x01\x00")
    with pytest.raises(MalformedRecordError):
        read_vecs(p)
    with pytest.raises(ValueError):
        read_vecs(tmp_path / "x.npy")


@given(st.sampled_from(["fvecs", "bvecs", "ivecs"]), st.integers(1, 6), st.integers(1, 9), st.integers(0, 99))
def test_vec_files_round_trip_bytes(tmp_path_factory, fmt, n, dim, seed):
    rng = np.random.default_rng(seed)
    if fmt == "fvecs":
        x = rng.standard_normal((n, dim)).astype(np.float32)
    elif fmt == "bvecs":
        x = rng.integers(0, 256, (n, dim))
    else:
        x = rng.integers(-2**31, 2**31 - 1, (n, dim))
    p = tmp_path_factory.mktemp("v") / f"x.{fmt}"
    write_vecs(p, x)
    raw = p.read_bytes()
    assert len(raw) == n * (4 + dim * (1 if fmt == "bvecs" else 4))
    y = read_vecs(p)
    np.testing.assert_array_equal(y, x)
    write_vecs(p, y, fmt)
    assert p.read_bytes() == raw
    assert len(read_vecs(p, count=1)) == 1


def test_brute_force_self_query_and_full_k():
    x = synthetic_mixture(300, 12, seed=2)
    ids, d = brute_force_knn(x, x[:20], 5)
    assert (ids[:, 0] == np.arange(20)).all() and (d[:, 0] == 0).all()
    ids, _ = brute_force_knn(x, x[:3], 300)
    assert all(sorted(row.tolist()) == list(range(300)) for row in ids)
    with pytest.raises(ValueError):
        brute_force_knn(x, x[:3], 301)


def test_brute_force_is_order_invariant():
    x = synthetic_mixture(500, 8, seed=3)
    q = synthetic_mixture(10, 8, seed=4)
    perm = np.random.default_rng(0).permutation(500)
    a, _ = brute_force_knn(x, q, 10)
    b, _ = brute_force_knn(x[perm], q, 10, ids=perm)
    np.testing.assert_array_equal(a, b)
    # oracle: plain float64 sort
    d = ((x[None].astype(np.float64) - q[:, None]) ** 2).sum(-1)
    np.testing.assert_array_equal(a, np.argsort(d, axis=1, kind="stable")[:, :10])


def test_recall_at_k():
    assert recall_at_k([[1, 2], [3, 4]], [[1, 9], [4, 3]], 2) == 0.75
    with pytest.raises(ValueError):
        recall_at_k([[1]], [], 1)


def tiny_config(**kw):
    base = dict(synthetic_n=1500, synthetic_dim=16, num_queries=30, warmup_queries=20, R=12, L_build=30,
                MAX_C=60, m=4, rounds=4, round_fraction=0.01, l=40)
    base.update(kw)
    return WorkloadConfig(**base)


def test_workload_defaults():
    cfg = WorkloadConfig()
    assert (cfg.initial_fraction, cfg.rounds, cfg.round_fraction) == (0.8, 32, 0.001)


def test_config_errors():
    for kw in ({"initial_fraction": 0}, {"rounds": -1}, {"rounds": 300, "round_fraction": 0.01},
               {"k": 10, "l": 5}, {"threads": 0}, {"R": 0}):
        with pytest.raises(ConfigError):
            tiny_config(**kw).validate()


def test_no_rounds_means_no_update_traffic():
    report, _ = run_workload(tiny_config(rounds=0))
    assert report.insert_ops == report.delete_ops == 0
    for phase in ("insert", "delete"):
        s = report.phases[phase]
        assert s.bytes_read == s.bytes_written == s.coupled_equiv_bytes == 0


def test_workload_outputs_reconcile(tmp_path):
    cfg = tiny_config(out_dir=str(tmp_path))
    report, raw = run_workload(cfg)
    assert report.insert_ops == report.delete_ops == 4 * 15
    assert report.live == 1200
    assert recall_from_dump(tmp_path / "results.csv", tmp_path / "truth.csv", 10) == pytest.approx(report.recall)
    total = raw["index"].store.snapshot()
    summed = report.phases["build"]
    for name in ("insert", "delete", "warmup", "query"):
        summed = summed + report.phases[name]
    assert summed == total
    assert report.recall > 0.8
    for name in ("summary.csv", "io_phases.csv", "query_stages.csv", "report.txt"):
        assert (tmp_path / name).stat().st_size > 0


def test_workload_is_reproducible():
    a, _ = run_workload(tiny_config(rounds=2))
    b, _ = run_workload(tiny_config(rounds=2))
    assert a.timing_free() == b.timing_free()


def run_cli(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr().out.strip()
    return code, (json.loads(out.splitlines()[-1]) if code == 0 and out.startswith("{") else out)


def test_cli_lifecycle(tmp_path, capsys):
    x = synthetic_mixture(900, 16, seed=5)
    write_vecs(tmp_path / "base.fvecs", x[:800])
    write_vecs(tmp_path / "more.fvecs", x[800:850])
    write_vecs(tmp_path / "q.fvecs", x[850:])
    idx = tmp_path / "idx" / "i"
    code, out = run_cli(capsys, "build", "--index", idx, "--data", tmp_path / "base.fvecs", "--R", 12,
                        "--L-build", 30, "--max-c", 60, "--m", 4)
    assert code == 0 and out["live"] == 800
    code, out = run_cli(capsys, "calibrate-tau", "--index", idx, "--queries", tmp_path / "q.fvecs", "--l", 40)
    assert code == 0 and 10 <= out["T"] <= 40
    code, out = run_cli(capsys, "insert", "--index", idx, "--data", tmp_path / "more.fvecs")
    assert code == 0 and out == {"inserted": 50, "first_id": 800}
    code, out = run_cli(capsys, "delete", "--index", idx, "--ids", "3,4,5", "--no-auto-consolidate",
                        "--consolidate")
    assert code == 0 and out["deleted"] == 3 and out["removed"] == 3
    truth, _ = brute_force_knn(np.delete(x[:850], [3, 4, 5], 0), x[850:], 10,
                               ids=np.delete(np.arange(850), [3, 4, 5]))
    write_vecs(tmp_path / "gt.ivecs", truth)
    code, out = run_cli(capsys, "query", "--index", idx, "--queries", tmp_path / "q.fvecs", "--gt",
                        tmp_path / "gt.ivecs", "--l", 60, "--out", tmp_path / "r.csv")
    assert code == 0 and out["recall"] > 0.9
    code, out = run_cli(capsys, "stats", "--index", idx)
    assert code == 0 and out["live"] == 847 and out["io"]["bytes_written"] > 0


def test_cli_exit_codes(tmp_path, capsys):
    assert cli.main(["frobnicate"]) == 2
    assert cli.main(["stats", "--index", str(tmp_path / "nothing")]) == 2
    assert cli.main(["build", "--index", str(tmp_path / "i"), "--data", str(tmp_path / "missing.fvecs")]) == 3
    (tmp_path / "t.fvecs").write_bytes(struct.pack("<i2f", 4, 1, 2))
    assert cli.main(["build", "--index", str(tmp_path / "i"), "--data", str(tmp_path / "t.fvecs")]) == 3
    assert cli.main(["build", "--index", str(tmp_path / "i"), "--synthetic", "300", "--dim", "16",
                     "--m", "4", "--R", "8", "--L-build", "20", "--max-c", "40"]) == 0
    assert cli.main(["build", "--index", str(tmp_path / "j"), "--synthetic", "300", "--R", "0"]) == 2
    assert cli.main(["delete", "--index", str(tmp_path / "i"), "--ids", "7", "--no-auto-consolidate"]) == 0
    assert cli.main(["delete", "--index", str(tmp_path / "i"), "--ids", "7"]) == 3
    assert cli.main(["delete", "--index", str(tmp_path / "i"), "--ids", "999"]) == 3
    assert cli.main(["delete", "--index", str(tmp_path / "i"), "--ids", "x"]) == 2
    assert cli.main(["bench", "--synthetic", "800", "--dim", "16", "--rounds", "300",
                     "--round-fraction", "0.01"]) == 2
    capsys.readouterr()
