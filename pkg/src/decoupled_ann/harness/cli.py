"""Command-line entry point: ``python -m decoupled_ann <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .. import query as q_engine
from ..errors import ANNError, DimensionMismatchError, EmptyIndexError, MalformedRecordError, UnknownNodeError
from ..graph import BuildParams, Index
from .datasets import read_vecs, synthetic_mixture
from .groundtruth import brute_force_knn, recall_at_k
from .workload import ConfigError, DataError, WorkloadConfig, format_report, run_workload

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3


def _load_vectors(path: str) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise DataError(f"{p} not found")
    return read_vecs(p)


def _open(path: str) -> Index:
    if not Path(f"{path}.meta").exists():
        raise ConfigError(f"no index at {path} (missing {path}.meta)")
    return Index.open(path)


def _add_build_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--R", type=int, default=32)
    p.add_argument("--L-build", type=int, default=75)
    p.add_argument("--max-c", type=int, default=160)
    p.add_argument("--alpha", type=float, default=1.2)
    p.add_argument("--m", type=int, default=None, help="PQ subspaces (default: derived from D)")
    p.add_argument("--num-pqs", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--vector-layout", action="store_true", help="place vectors with the page placement policy")
    p.add_argument("--coupled-accounting", action=argparse.BooleanOptionalAction, default=True,
                   help="also count the bytes a coupled layout would move")


def cmd_build(a) -> int:
    if a.data:
        x = _load_vectors(a.data)
    else:
        x = synthetic_mixture(a.synthetic, a.dim, seed=a.seed)
    params = BuildParams(a.R, a.L_build, a.max_c, a.alpha)
    Path(a.index).parent.mkdir(parents=True, exist_ok=True)
    index = Index.build(x, params, path=a.index, m=a.m, num_pqs=a.num_pqs, seed=a.seed,
                        coupled_accounting=a.coupled_accounting, vector_layout=a.vector_layout)
    index.save()
    print(json.dumps(asdict(index.stats())))
    return EXIT_OK


def cmd_insert(a) -> int:
    index = _open(a.index)
    x = _load_vectors(a.data)
    ids = [index.insert(v) for v in x]
    index.save()
    print(json.dumps({"inserted": len(ids), "first_id": ids[0] if ids else None}))
    return EXIT_OK


def _parse_ids(a) -> list[int]:
    ids: list[int] = []
    if a.ids:
        try:
            ids += [int(s) for s in a.ids.split(",") if s.strip()]
        except ValueError:
            raise ConfigError(f"bad id list {a.ids!r}") from None
    if a.ids_file:
        p = Path(a.ids_file)
        if not p.exists():
            raise DataError(f"{p} not found")
        try:
            ids += [int(s) for s in p.read_text().split()]
        except ValueError:
            raise DataError(f"{p}: expected whitespace-separated integers") from None
    return ids


def cmd_delete(a) -> int:
    index = _open(a.index)
    if a.no_auto_consolidate:
        index.consolidate_every = None
    ids = _parse_ids(a)
    for node in ids:
        index.delete(node)
    report = index.consolidate_deletes() if a.consolidate else None
    index.save()
    out = {"deleted": len(ids)}
    if report is not None:
        out.update(removed=report.removed, repaired=report.repaired, pages_written=report.pages_written)
    print(json.dumps(out))
    return EXIT_OK


def _query_params(a, index: Index) -> q_engine.QueryParams:
    T = a.tau_T if a.tau_T is not None else index.tau_T
    if T is not None:
        T = min(T, a.l)
    return q_engine.QueryParams(k=a.k, l=a.l, tau_T=T, num_pqs=a.num_pqs, tau=a.tau)


def cmd_query(a) -> int:
    index = _open(a.index)
    qs = _load_vectors(a.queries)
    p = _query_params(a, index)
    results = [q_engine.search(index, q, p) for q in qs]
    if a.out:
        with open(a.out, "w") as f:
            f.write("query,rank,node,distance\n")
            for i, res in enumerate(results):
                for r, (node, d) in enumerate(res):
                    f.write(f"{i},{r},{node},{d!r}\n")
    out = {"queries": len(qs), "k": p.k, "l": p.l, "tau": p.rerank_budget()}
    if a.gt:
        gt = read_vecs(a.gt) if Path(a.gt).exists() else None
        if gt is None:
            raise DataError(f"{a.gt} not found")
        out["recall"] = recall_at_k([[n for n, _ in r] for r in results], gt, p.k)
    print(json.dumps(out))
    return EXIT_OK


def cmd_calibrate(a) -> int:
    index = _open(a.index)
    qs = _load_vectors(a.queries)[: a.sample]
    if a.gt:
        truth = _load_vectors(a.gt).astype(np.int64)[: len(qs)]
    else:
        live = index.store.directory.live_nodes()
        truth, _ = brute_force_knn(index.store.peek_vectors(live), qs, a.k, ids=live)
    p = q_engine.QueryParams(k=a.k, l=a.l, num_pqs=a.num_pqs, target_recall=a.target_recall)
    T = q_engine.warmup_tau(index, qs, truth, p)
    index.tau_T = T
    index.save()
    print(json.dumps({"T": T, "tau": q_engine.effective_tau(T, a.l)}))
    return EXIT_OK


def cmd_stats(a) -> int:
    index = _open(a.index)
    out = asdict(index.stats())
    out["io"] = index.store.stats.as_dict()
    out["tau_T"] = index.tau_T
    print(json.dumps(out))
    return EXIT_OK


def cmd_bench(a) -> int:
    cfg = WorkloadConfig(
        dataset=a.data or "synthetic", queries=a.queries, synthetic_n=a.synthetic, synthetic_dim=a.dim,
        initial_fraction=a.initial_fraction, rounds=a.rounds, round_fraction=a.round_fraction, k=a.k, l=a.l,
        target_recall=a.target_recall, num_pqs=a.num_pqs, m=a.m, num_queries=a.num_queries,
        warmup_queries=a.warmup_queries, threads=a.threads, seed=a.seed, R=a.R, L_build=a.L_build,
        MAX_C=a.max_c, alpha=a.alpha, coupled_accounting=a.coupled_accounting, vector_layout=a.vector_layout,
        index_path=a.index, out_dir=a.out,
    )
    report, _ = run_workload(cfg, log=lambda msg: print(msg, file=sys.stderr))
    print(format_report(report), end="")
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="decoupled_ann", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build", help="build an index from a vector file or synthetic data")
    p.add_argument("--index", required=True, help="index file stem")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", help=".fvecs/.bvecs file")
    src.add_argument("--synthetic", type=int, help="generate this many synthetic vectors")
    p.add_argument("--dim", type=int, default=128)
    _add_build_flags(p)
    p.set_defaults(fn=cmd_build)

    p = sub.add_parser("insert", help="insert every vector of a file")
    p.add_argument("--index", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(fn=cmd_insert)

    p = sub.add_parser("delete", help="delete nodes by id")
    p.add_argument("--index", required=True)
    p.add_argument("--ids", help="comma-separated node ids")
    p.add_argument("--ids-file", help="file of whitespace-separated node ids")
    p.add_argument("--consolidate", action="store_true", help="repair the graph right away")
    p.add_argument("--no-auto-consolidate", action="store_true")
    p.set_defaults(fn=cmd_delete)

    for name, fn, hlp in (("query", cmd_query, "run top-k queries"),
                          ("calibrate-tau", cmd_calibrate, "calibrate the rerank threshold T")):
        p = sub.add_parser(name, help=hlp)
        p.add_argument("--index", required=True)
        p.add_argument("--queries", required=True)
        p.add_argument("--gt", help="ground truth .ivecs")
        p.add_argument("--k", type=int, default=10)
        p.add_argument("--l", type=int, default=100)
        p.add_argument("--num-pqs", type=int, default=2)
        if name == "query":
            p.add_argument("--tau-T", type=int, default=None)
            p.add_argument("--tau", type=int, default=None)
            p.add_argument("--out", help="write results CSV here")
        else:
            p.add_argument("--target-recall", type=float, default=0.98)
            p.add_argument("--sample", type=int, default=100)
        p.set_defaults(fn=fn)

    p = sub.add_parser("bench", help="build, run update rounds, calibrate and query; write CSV reports")
    p.add_argument("--data")
    p.add_argument("--queries")
    p.add_argument("--synthetic", type=int, default=20000)
    p.add_argument("--dim", type=int, default=128)
    p.add_argument("--initial-fraction", type=float, default=0.80)
    p.add_argument("--rounds", type=int, default=32)
    p.add_argument("--round-fraction", type=float, default=0.001)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--l", type=int, default=100)
    p.add_argument("--target-recall", type=float, default=0.98)
    p.add_argument("--num-queries", type=int, default=1000)
    p.add_argument("--warmup-queries", type=int, default=100)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--index", help="keep the index at this file stem (default: in memory)")
    p.add_argument("--out", help="directory for CSV and text reports")
    _add_build_flags(p)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("stats", help="print index statistics and I/O counters")
    p.add_argument("--index", required=True)
    p.set_defaults(fn=cmd_stats)
    return ap


def main(argv=None) -> int:
    ap = make_parser()
    try:
        a = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    try:
        return a.fn(a)
    except (DataError, MalformedRecordError, DimensionMismatchError, UnknownNodeError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, ValueError, EmptyIndexError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ANNError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
