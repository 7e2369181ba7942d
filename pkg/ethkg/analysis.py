"""
Structural and diagnostic analysis: Krackhardt hierarchy scores of snapshots,
tangent-space norm statistics, and plot-ready CSV exports of a trained model.
"""

import csv
from dataclasses import (
    dataclass,
    field,
)
import logging
import math
from pathlib import Path
from typing import (
    Dict,
    List,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import networkx as nx
import numpy as np

from ethkg.data import (
    HistoryWindow,
    Snapshot,
    TkgDataset,
    build_snapshots,
)
from ethkg.errors import DataError
from ethkg.evaluation import (
    build_filter_mask,
    evaluation_windows,
    rank_queries,
    score_window,
)
from ethkg.model import EthParams
from ethkg.system_config import FilterSetting
from ethkg.workers import EvaluationPool


logger = logging.getLogger("ethkg.analysis")

HISTOGRAM_BINS = 20
QUANTILE_NAMES = ("q05", "q25", "q50", "q75", "q95")


def _fmt(value: float) -> str:
    return f"{value:.6g}"


def snapshot_graph(snapshot: Snapshot, num_relations: int) -> nx.DiGraph:
    """Directed graph of a snapshot's original (non-inverse) edges."""
    graph = nx.DiGraph()
    original = snapshot.triples[snapshot.relations < num_relations]
    graph.add_edges_from((int(s), int(o)) for s, _, o in original if s != o)
    return graph


def khs_graph(graph: nx.DiGraph) -> float:
    """1 - symmetric reachable pairs / reachable pairs; 0 when nothing is reachable."""
    reach = {node: nx.descendants(graph, node) for node in graph.nodes}
    reachable = 0
    symmetric = 0
    for i, targets in reach.items():
        reachable += len(targets)
        symmetric += sum(1 for j in targets if i in reach[j])
    if reachable == 0:
        return 0.0
    return 1.0 - symmetric / reachable


def khs(snapshot: Snapshot, num_relations: int) -> float:
    """Krackhardt hierarchy score of one snapshot, in [0, 1]."""
    return khs_graph(snapshot_graph(snapshot, num_relations))


@dataclass
class KhsReport:
    """Hierarchy score of every snapshot of a dataset"""

    times: np.ndarray
    scores: np.ndarray

    def summary(self) -> Dict[str, float]:
        """Get min, quartiles, max and mean of the per-snapshot scores"""
        if self.scores.size == 0:
            raise DataError("no snapshots to summarize")
        q1, median, q3 = np.percentile(self.scores, [25, 50, 75])
        return {
            "min": float(self.scores.min()),
            "q1": float(q1),
            "median": float(median),
            "q3": float(q3),
            "max": float(self.scores.max()),
            "mean": float(self.scores.mean()),
        }

    def write_csv(self, path: Union[str, Path]) -> Path:
        rows = [[int(t), _fmt(s)] for t, s in zip(self.times, self.scores)]
        return _write_csv(path, ["time", "khs"], rows)


def khs_report(dataset: TkgDataset) -> KhsReport:
    """Score every snapshot of every split."""
    quads = np.concatenate([dataset.train, dataset.valid, dataset.test], axis=0)
    snapshots = build_snapshots(quads)
    num_relations = dataset.vocab.num_relations
    scores = np.asarray([khs(s, num_relations) for s in snapshots], dtype=np.float64)
    times = np.asarray([s.time for s in snapshots], dtype=np.int64)
    logger.info(f"Computed Khs for {len(snapshots)} snapshots of {dataset.name}")
    return KhsReport(times, scores)


def norm_summary(values: np.ndarray, bins: int = HISTOGRAM_BINS) -> Dict[str, object]:
    """Mean, spread, quantiles and a density histogram of a norm sample."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return {"count": 0}
    quantiles = np.percentile(values, [5, 25, 50, 75, 95])
    density, edges = np.histogram(values, bins=bins, density=True)
    return {
        "count": int(values.size),
        "mean": float(values.mean()),
        "std": float(values.std()),
        "quantiles": dict(zip(QUANTILE_NAMES, map(float, quantiles))),
        "density": density.tolist(),
        "edges": edges.tolist(),
    }


@dataclass
class WindowDiagnostics:
    time: int
    entities: np.ndarray
    relations: np.ndarray
    golds: np.ndarray
    betas: np.ndarray
    ranks: np.ndarray
    query_norms: np.ndarray
    candidate_norms: np.ndarray


@dataclass
class Diagnostics:
    """Everything export_diagnostics computed, plus the files it wrote"""

    candidate_norms: np.ndarray
    query_norms: np.ndarray
    curvatures: np.ndarray
    windows: List[WindowDiagnostics]
    khs: KhsReport
    paths: Dict[str, Path] = field(default_factory=dict)

    @property
    def betas(self) -> np.ndarray:
        return _concat([w.betas for w in self.windows], np.float64)

    @property
    def ranks(self) -> np.ndarray:
        return _concat([w.ranks for w in self.windows], np.int64)

    def norm_summaries(self) -> Dict[str, Dict[str, object]]:
        return {
            "candidate": norm_summary(self.candidate_norms),
            "query": norm_summary(self.query_norms),
        }


def _concat(parts: Sequence[np.ndarray], dtype) -> np.ndarray:
    if not parts:
        return np.zeros(0, dtype=dtype)
    return np.concatenate(parts).astype(dtype)


def diagnose_window(params: EthParams, window: HistoryWindow) -> WindowDiagnostics:
    """Tangent norms, mixing coefficients and time-filtered ranks of one target."""
    queries, result = score_window(params, window)
    mask = build_filter_mask(queries, params.vocab.num_entities, FilterSetting.TIME)
    ranks = rank_queries(result.logits.value, queries.targets, mask)
    return WindowDiagnostics(
        queries.time,
        queries.entities,
        queries.relations,
        queries.targets,
        result.beta.value[:, 0].copy(),
        ranks,
        np.linalg.norm(result.h_q_g.value, axis=1),
        np.linalg.norm(result.h_a_g.value, axis=1),
    )


def _write_csv(path: Union[str, Path], header: List[str], rows: List[List]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(header)
            writer.writerows(rows)
    except OSError as e:
        raise DataError(f"cannot write {path}: {e}") from e
    return path


def export_diagnostics(
    params: EthParams,
    dataset: TkgDataset,
    out_dir: Union[str, Path],
    workers: Optional[int] = None,
) -> Diagnostics:
    """Write norms.csv, curvature.csv, queries.csv and khs.csv into out_dir.

    Candidate norms come from the final test snapshot's encoder state; query
    norms, betas and ranks cover every test query and its inverse.
    """
    out_dir = Path(out_dir)
    windows = evaluation_windows(params, dataset, "test")
    if not windows:
        raise DataError("diagnostics need a non-empty test split")
    with EvaluationPool(workers) as pool:
        per_window = pool.map_ordered(lambda w: diagnose_window(params, w), windows)

    candidate_norms = per_window[-1].candidate_norms
    query_norms = _concat([w.query_norms for w in per_window], np.float64)
    curvatures = params.curvatures()
    report = khs_report(dataset)
    diagnostics = Diagnostics(
        candidate_norms, query_norms, curvatures, per_window, report
    )

    norm_rows = [["candidate", i, _fmt(v)] for i, v in enumerate(candidate_norms)]
    norm_rows += [["query", i, _fmt(v)] for i, v in enumerate(query_norms)]
    diagnostics.paths["norms"] = _write_csv(
        out_dir / "norms.csv", ["kind", "id", "norm"], norm_rows
    )

    num_relations = params.vocab.num_relations
    curvature_rows = [
        [r, r % num_relations, int(r >= num_relations), _fmt(c)]
        for r, c in enumerate(curvatures)
    ]
    diagnostics.paths["curvature"] = _write_csv(
        out_dir / "curvature.csv",
        ["relation", "base_relation", "inverse", "curvature"],
        curvature_rows,
    )

    query_rows = []
    for w in per_window:
        rows = zip(w.entities, w.relations, w.golds, w.betas, w.ranks)
        for q, r, gold, beta, rank in rows:
            neg_log = _fmt(0.0 - math.log10(rank))
            query_rows.append(
                [w.time, int(q), int(r), int(gold), _fmt(beta), int(rank), neg_log]
            )
    diagnostics.paths["queries"] = _write_csv(
        out_dir / "queries.csv",
        ["time", "q", "r", "gold", "beta", "rank", "neg_log10_rank"],
        query_rows,
    )
    diagnostics.paths["khs"] = report.write_csv(out_dir / "khs.csv")
    logger.info(f"Wrote diagnostics for {len(query_rows)} test queries to {out_dir}")
    return diagnostics


def summarize_rows(summary: Dict[str, float]) -> List[Tuple[str, str]]:
    """Label/value pairs of a Khs summary, in display order."""
    order = ("min", "q1", "median", "q3", "max", "mean")
    return [(name, _fmt(summary[name])) for name in order]
