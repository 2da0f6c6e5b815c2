"""End-to-end workload: build, update rounds, tau warm-up and a query batch.

The update phase follows the usual streaming-index protocol: build on a
prefix of the data, then run rounds that each insert the next slice of
unseen vectors and delete as many random live ones.

CSV outputs written to ``out_dir``:

``summary.csv``        metric,value
``io_phases.csv``      phase,topo_pages_read,topo_pages_written,vec_pages_read,vec_pages_written,
                       bytes_read,bytes_written,coupled_equiv_bytes,decoupled_over_coupled
``query_stages.csv``   query,expanded,topo_pages_read,buffer_hits,tau,refined,vec_pages_read,latency_ms
``results.csv``        query,rank,node,distance
``truth.csv``          query,rank,node
``report.txt``         the same numbers for people
"""

from __future__ import annotations

import csv
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .. import query as q_engine
from ..errors import MalformedRecordError
from ..graph import BuildParams, Index
from ..pagestore import IoStats
from .datasets import read_vecs, synthetic_mixture
from .groundtruth import brute_force_knn, recall_at_k


class ConfigError(ValueError):
    pass


class DataError(MalformedRecordError):
    pass


@dataclass
class WorkloadConfig:
    dataset: str = "synthetic"  # a .fvecs/.bvecs path, or "synthetic"
    queries: str | None = None  # query file; default holds out rows of the dataset
    synthetic_n: int = 20000
    synthetic_dim: int = 128
    initial_fraction: float = 0.80
    rounds: int = 32
    round_fraction: float = 0.001
    k: int = 10
    l: int = 100
    target_recall: float = 0.98
    num_pqs: int = 2
    m: int | None = None
    num_queries: int = 1000
    warmup_queries: int = 100
    threads: int = 1
    seed: int = 0
    R: int = 32
    L_build: int = 75
    MAX_C: int = 160
    alpha: float = 1.2
    coupled_accounting: bool = True
    vector_layout: bool = False
    index_path: str | None = None
    out_dir: str | None = None

    def validate(self) -> None:
        if not 0.0 < self.initial_fraction <= 1.0:
            raise ConfigError("initial_fraction must be in (0, 1]")
        if self.rounds < 0 or self.round_fraction < 0:
            raise ConfigError("rounds and round_fraction must be non-negative")
        if self.round_fraction * self.rounds > 1.0 - self.initial_fraction + 1e-12:
            raise ConfigError("rounds * round_fraction exceeds the data left after the initial build")
        if self.k < 1 or self.l < self.k:
            raise ConfigError("need 1 <= k <= l")
        if not 0.0 < self.target_recall <= 1.0:
            raise ConfigError("target_recall must be in (0, 1]")
        if self.num_pqs < 1 or self.threads < 1:
            raise ConfigError("num_pqs and threads must be >= 1")
        if self.num_queries < 1 or self.warmup_queries < 0:
            raise ConfigError("need at least one query")
        try:
            BuildParams(self.R, self.L_build, self.MAX_C, self.alpha)
        except ValueError as e:
            raise ConfigError(str(e)) from None


@dataclass
class Report:
    recall: float
    k: int
    tau_T: int
    tau: int
    queries: int
    qps: float
    latency_ms: dict
    insert_ops: int
    delete_ops: int
    insert_per_s: float
    delete_per_s: float
    phases: dict = field(default_factory=dict)  # name -> IoStats
    stages: dict = field(default_factory=dict)  # mean per-query stage counters
    live: int = 0
    build_seconds: float = 0.0

    def timing_free(self) -> dict:
        """Everything except wall-clock measurements."""
        d = asdict(self)
        for key in ("qps", "latency_ms", "insert_per_s", "delete_per_s", "build_seconds"):
            d.pop(key)
        return d


def _load(cfg: WorkloadConfig):
    if cfg.dataset == "synthetic":
        extra = 0 if cfg.queries else cfg.num_queries + cfg.warmup_queries
        data = synthetic_mixture(cfg.synthetic_n + extra, cfg.synthetic_dim, seed=cfg.seed)
    else:
        path = Path(cfg.dataset)
        if not path.exists():
            raise DataError(f"dataset {path} not found")
        data = read_vecs(path)
    if cfg.queries:
        qpath = Path(cfg.queries)
        if not qpath.exists():
            raise DataError(f"query file {qpath} not found")
        queries = read_vecs(qpath)
        if queries.shape[1] != data.shape[1]:
            raise DataError("query and base dimensions differ")
        base = data
        held = queries
    else:
        hold = cfg.num_queries + cfg.warmup_queries
        if data.shape[0] <= hold:
            raise DataError("dataset too small to hold out queries")
        base, held = data[:-hold], data[-hold:]
    if cfg.warmup_queries and not cfg.queries:
        warm, queries = held[: cfg.warmup_queries], held[cfg.warmup_queries:]
    else:
        warm, queries = held[: cfg.warmup_queries], held[: cfg.num_queries]
    queries = queries[: cfg.num_queries]
    return base, warm, queries


def _phase_row(name: str, s: IoStats) -> list:
    moved = s.bytes_read + s.bytes_written
    ratio = moved / s.coupled_equiv_bytes if s.coupled_equiv_bytes else float("nan")
    return [name, s.topo_pages_read, s.topo_pages_written, s.vec_pages_read, s.vec_pages_written,
            s.bytes_read, s.bytes_written, s.coupled_equiv_bytes, ratio]


def run_workload(cfg: WorkloadConfig, *, log=None) -> tuple[Report, dict]:
    """Run the whole workload; returns the report and the raw per-query outputs."""
    cfg.validate()
    say = log or (lambda *_: None)
    base, warm, queries = _load(cfg)
    n = base.shape[0]
    n_init = max(1, int(round(cfg.initial_fraction * n)))
    per_round = int(round(cfg.round_fraction * n))
    if cfg.rounds and per_round < 1:
        raise DataError(f"dataset of {n} vectors is too small for rounds of {cfg.round_fraction:.4%}")
    if n_init + cfg.rounds * per_round > n:
        raise DataError("not enough vectors for the requested update rounds")
    rng = np.random.default_rng(cfg.seed)
    params = BuildParams(cfg.R, cfg.L_build, cfg.MAX_C, cfg.alpha)

    say(f"building on {n_init} of {n} vectors (D={base.shape[1]})")
    t0 = time.perf_counter()
    index = Index.build(base[:n_init], params, path=cfg.index_path, m=cfg.m, num_pqs=cfg.num_pqs,
                        seed=cfg.seed, coupled_accounting=cfg.coupled_accounting,
                        vector_layout=cfg.vector_layout)
    build_s = time.perf_counter() - t0
    phases = {"build": index.store.snapshot()}

    ins_io, del_io = IoStats(), IoStats()
    ins_t = del_t = 0.0
    nxt = n_init
    for r in range(cfg.rounds):
        s0 = index.store.snapshot()
        t = time.perf_counter()
        for row in range(nxt, nxt + per_round):
            node = index.insert(base[row])
            assert node == row
        nxt += per_round
        ins_t += time.perf_counter() - t
        s1 = index.store.snapshot()
        ins_io = ins_io + (s1 - s0)
        live = index.store.directory.live_nodes()
        victims = rng.choice(live, size=min(per_round, len(live)), replace=False)
        t = time.perf_counter()
        for v in victims:
            index.delete(int(v))
        if len(index.store.directory.deleted_nodes()):
            index.consolidate_deletes()
        del_t += time.perf_counter() - t
        del_io = del_io + (index.store.snapshot() - s1)
        say(f"round {r + 1}/{cfg.rounds}: {len(index)} live")
    phases["insert"] = ins_io
    phases["delete"] = del_io

    live = index.store.directory.live_nodes()
    truth_ids, _ = brute_force_knn(base[live], queries, cfg.k, ids=live)
    qp = q_engine.QueryParams(k=cfg.k, l=cfg.l, num_pqs=cfg.num_pqs, target_recall=cfg.target_recall)
    s0 = index.store.snapshot()
    if len(warm):
        warm_truth, _ = brute_force_knn(base[live], warm, cfg.k, ids=live)
        T = q_engine.warmup_tau(index, warm, warm_truth, qp)
    else:
        T = cfg.l
    phases["warmup"] = index.store.snapshot() - s0
    qp = q_engine.QueryParams(k=cfg.k, l=cfg.l, num_pqs=cfg.num_pqs, target_recall=cfg.target_recall, tau_T=T)
    say(f"calibrated T={T}, tau={qp.rerank_budget()}")

    def one(i):
        trace = q_engine.QueryTrace()
        t = time.perf_counter()
        res = q_engine.search(index, queries[i], qp, trace)
        return res, trace, (time.perf_counter() - t) * 1e3

    s0 = index.store.snapshot()
    index.buffer.reset_stats()
    t = time.perf_counter()
    if cfg.threads == 1:
        outs = [one(i) for i in range(len(queries))]
    else:
        with ThreadPoolExecutor(cfg.threads) as pool:
            outs = list(pool.map(one, range(len(queries))))
    wall = time.perf_counter() - t
    phases["query"] = index.store.snapshot() - s0

    results = [[node for node, _ in res] for res, _, _ in outs]
    lat = np.array([ms for _, _, ms in outs])
    traces = [tr for _, tr, _ in outs]
    stages = {
        "expanded": float(np.mean([t.expanded for t in traces])),
        "topo_pages_read": float(np.mean([t.topo_pages_read for t in traces])),
        "buffer_hits": float(np.mean([t.buffer_hits for t in traces])),
        "refined": float(np.mean([t.refined for t in traces])),
        "vec_pages_read": float(np.mean([t.vec_pages_read for t in traces])),
        "buffer_hit_rate": index.buffer.stats.hit_rate,
    }
    report = Report(
        recall=recall_at_k(results, truth_ids, cfg.k), k=cfg.k, tau_T=int(T), tau=qp.rerank_budget(),
        queries=len(queries), qps=len(queries) / wall if wall > 0 else float("inf"),
        latency_ms={p: float(np.percentile(lat, p)) for p in (50, 95, 99)},
        insert_ops=cfg.rounds * per_round, delete_ops=cfg.rounds * per_round,
        insert_per_s=cfg.rounds * per_round / ins_t if ins_t > 0 else 0.0,
        delete_per_s=cfg.rounds * per_round / del_t if del_t > 0 else 0.0,
        phases=phases, stages=stages, live=int(len(live)), build_seconds=build_s,
    )
    raw = {"results": outs, "truth": truth_ids, "index": index}
    if cfg.out_dir:
        write_report(report, outs, truth_ids, cfg.out_dir)
    if cfg.index_path:
        index.save()
    return report, raw


def write_report(report: Report, outs, truth_ids, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "summary.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["metric", "value"])
        for key in ("recall", "k", "tau_T", "tau", "queries", "qps", "insert_ops", "delete_ops",
                    "insert_per_s", "delete_per_s", "live", "build_seconds"):
            w.writerow([key, getattr(report, key)])
        for p, v in report.latency_ms.items():
            w.writerow([f"latency_p{p}_ms", v])
        for key, v in report.stages.items():
            w.writerow([f"mean_{key}", v])
    with open(out / "io_phases.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["phase", "topo_pages_read", "topo_pages_written", "vec_pages_read", "vec_pages_written",
                    "bytes_read", "bytes_written", "coupled_equiv_bytes", "decoupled_over_coupled"])
        for name, s in report.phases.items():
            w.writerow(_phase_row(name, s))
    with open(out / "query_stages.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["query", "expanded", "topo_pages_read", "buffer_hits", "tau", "refined", "vec_pages_read",
                    "latency_ms"])
        for i, (_, t, ms) in enumerate(outs):
            w.writerow([i, t.expanded, t.topo_pages_read, t.buffer_hits, t.tau, t.refined, t.vec_pages_read,
                        f"{ms:.4f}"])
    with open(out / "results.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["query", "rank", "node", "distance"])
        for i, (res, _, _) in enumerate(outs):
            for rank, (node, dist) in enumerate(res):
                w.writerow([i, rank, node, repr(dist)])
    with open(out / "truth.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["query", "rank", "node"])
        for i, row in enumerate(truth_ids):
            for rank, node in enumerate(row):
                w.writerow([i, rank, int(node)])
    (out / "report.txt").write_text(format_report(report))


def format_report(r: Report) -> str:
    lines = [
        f"recall@{r.k}: {r.recall:.4f} over {r.queries} queries (T={r.tau_T}, tau={r.tau})",
        f"query: {r.qps:.1f} qps; latency p50 {r.latency_ms[50]:.3f} ms, p95 {r.latency_ms[95]:.3f} ms, "
        f"p99 {r.latency_ms[99]:.3f} ms",
        f"updates: {r.insert_ops} inserts ({r.insert_per_s:.1f}/s), {r.delete_ops} deletes ({r.delete_per_s:.1f}/s)",
        f"live nodes: {r.live}; build took {r.build_seconds:.1f} s",
        "",
        "per-query means: " + ", ".join(f"{k} {v:.3f}" for k, v in r.stages.items()),
        "",
        f"{'phase':8} {'topo r':>10} {'topo w':>10} {'vec r':>10} {'vec w':>10} {'MiB moved':>10} "
        f"{'coupled MiB':>12} {'ratio':>6}",
    ]
    for name, s in r.phases.items():
        row = _phase_row(name, s)
        moved = (s.bytes_read + s.bytes_written) / 2**20
        lines.append(f"{name:8} {row[1]:>10} {row[2]:>10} {row[3]:>10} {row[4]:>10} {moved:>10.1f} "
                     f"{s.coupled_equiv_bytes / 2**20:>12.1f} {row[8]:>6.3f}")
    return "\n".join(lines) + "\n"


def recall_from_dump(results_csv, truth_csv, k: int) -> float:
    """Recompute recall from the written ``results.csv`` and ``truth.csv``."""
    def load(path, col):
        rows: dict[int, list[int]] = {}
        with open(path) as f:
            for rec in csv.DictReader(f):
                rows.setdefault(int(rec["query"]), []).append(int(rec[col]))
        return rows
    res = load(results_csv, "node")
    truth = load(truth_csv, "node")
    qs = sorted(truth)
    return recall_at_k([res.get(i, []) for i in qs], [truth[i] for i in qs], k)
