"""
Ranking metrics for ETH: time-filtered and raw MRR and Hits@k.
"""

from dataclasses import (
    dataclass,
    field,
)
import logging
from pathlib import Path
from typing import (
    Dict,
    List,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np

from ethkg.data import (
    HistoryWindow,
    TkgDataset,
    history_windows,
)
from ethkg.errors import (
    InvalidArgumentError,
    RankingError,
)
from ethkg.model import (
    EthParams,
    ForwardResult,
    QueryBatch,
    forward,
)
from ethkg.system_config import FilterSetting
from ethkg.workers import EvaluationPool


logger = logging.getLogger("ethkg.evaluation")

HITS_AT = (1, 3, 10)


def mean_reciprocal_rank(ranks: np.ndarray) -> float:
    """Mean of 1/rank; 0.0 for an empty rank list."""
    ranks = np.asarray(ranks, dtype=np.float64)
    return float(np.mean(1.0 / ranks)) if ranks.size else 0.0


def hits_at_k(ranks: np.ndarray, k: int) -> float:
    """Fraction of ranks <= k."""
    ranks = np.asarray(ranks)
    return float(np.mean(ranks <= k)) if ranks.size else 0.0


def random_baseline_mrr(num_entities: int) -> float:
    """Expected MRR of uniformly random scoring: H_|V| / |V|."""
    if num_entities < 1:
        raise InvalidArgumentError("num_entities must be >= 1")
    return float(np.sum(1.0 / np.arange(1, num_entities + 1)) / num_entities)


@dataclass
class RankReport:
    """Per-query ranks plus the aggregates computed from them"""

    times: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    entities: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    relations: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    golds: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    ranks: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    setting: FilterSetting = FilterSetting.TIME

    @classmethod
    def concat(
        cls, parts: Sequence["RankReport"], setting: FilterSetting = FilterSetting.TIME
    ) -> "RankReport":
        if not parts:
            return cls(setting=setting)
        return cls(
            *(
                np.concatenate([getattr(p, name) for p in parts])
                for name in ("times", "entities", "relations", "golds", "ranks")
            ),
            setting=setting,
        )

    @property
    def count(self) -> int:
        return int(self.ranks.shape[0])

    @property
    def mrr(self) -> float:
        return mean_reciprocal_rank(self.ranks)

    def hits(self, k: int) -> float:
        return hits_at_k(self.ranks, k)

    def metrics(self) -> Dict[str, float]:
        """Get MRR and Hits@1/3/10 as fractions"""
        summary = {"mrr": self.mrr}
        summary.update({f"hits@{k}": self.hits(k) for k in HITS_AT})
        return summary

    def format_table_row(self) -> str:
        """MRR and Hits@1/3/10 as percentages with two decimals"""
        values = [self.mrr] + [self.hits(k) for k in HITS_AT]
        return "  ".join(f"{100.0 * v:.2f}" for v in values)

    def write_csv(self, path: Union[str, Path]) -> Path:
        """Write one line per query: time,q,r,gold,rank"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        table = np.stack(
            [self.times, self.entities, self.relations, self.golds, self.ranks], axis=1
        ).astype(np.int64)
        np.savetxt(
            path,
            table,
            fmt="%d",
            delimiter=",",
            header="time,q,r,gold,rank",
            comments="",
        )
        return path


def rank_queries(
    scores: np.ndarray, golds: np.ndarray, filter_mask: Optional[np.ndarray] = None
) -> np.ndarray:
    """Rank of each gold among unmasked candidates, ties broken by candidate id.

    rank = 1 + #{a unmasked: s[a] > s[gold]} + #{a unmasked: s[a] == s[gold], a < gold}
    """
    scores = np.asarray(scores, dtype=np.float64)
    golds = np.asarray(golds, dtype=np.int64)
    num_q, num_v = scores.shape
    if golds.shape != (num_q,):
        raise InvalidArgumentError("one gold per score row required")
    if num_q == 0:
        return np.zeros(0, dtype=np.int64)
    if golds.min() < 0 or golds.max() >= num_v:
        raise InvalidArgumentError("gold id out of range")

    rows = np.arange(num_q)
    if filter_mask is None:
        filter_mask = np.zeros(scores.shape, dtype=bool)
    elif filter_mask.shape != scores.shape:
        raise InvalidArgumentError("filter mask must match the score matrix")
    if filter_mask[rows, golds].any():
        raise RankingError("filter mask hides a gold candidate")

    masked = np.where(filter_mask, -np.inf, scores)
    gold_scores = masked[rows, golds][:, None]
    ids = np.arange(num_v)[None, :]
    better = (masked > gold_scores) & ~filter_mask
    tied = (masked == gold_scores) & (ids < golds[:, None]) & ~filter_mask
    return 1 + better.sum(axis=1) + tied.sum(axis=1)


def answer_matrix(queries: QueryBatch, num_entities: int) -> np.ndarray:
    """(Q, |V|) bool: every gold object of the same (q, r) within the batch."""
    if queries.targets is None:
        raise InvalidArgumentError("queries carry no gold targets")
    if len(queries) == 0:
        return np.zeros((0, num_entities), dtype=bool)
    keys = np.stack([queries.entities, queries.relations], axis=1)
    _, group = np.unique(keys, axis=0, return_inverse=True)
    group = group.reshape(-1)
    answers = np.zeros((int(group.max()) + 1, num_entities), dtype=bool)
    answers[group, queries.targets] = True
    return answers[group]


def build_filter_mask(
    queries: QueryBatch, num_entities: int, setting: FilterSetting = FilterSetting.TIME
) -> np.ndarray:
    """Mask of competitors removed before ranking each query's gold."""
    if FilterSetting(setting) is FilterSetting.RAW:
        return np.zeros((len(queries), num_entities), dtype=bool)
    mask = answer_matrix(queries, num_entities)
    mask[np.arange(len(queries)), queries.targets] = False
    return mask


def score_window(
    params: EthParams, window: HistoryWindow
) -> Tuple[QueryBatch, ForwardResult]:
    """Run the frozen model on every query of a window's target snapshot."""
    queries = QueryBatch.from_snapshot(window.target)
    return queries, forward(params, window, queries, training=False)


def rank_window(
    params: EthParams,
    window: HistoryWindow,
    setting: FilterSetting = FilterSetting.TIME,
) -> RankReport:
    queries, result = score_window(params, window)
    mask = build_filter_mask(queries, params.vocab.num_entities, setting)
    ranks = rank_queries(result.logits.value, queries.targets, mask)
    return RankReport(
        np.full(len(queries), queries.time, dtype=np.int64),
        queries.entities,
        queries.relations,
        queries.targets,
        ranks,
        setting,
    )


def evaluation_windows(
    params: EthParams, dataset: TkgDataset, split: str
) -> List[HistoryWindow]:
    """History windows for every snapshot of a split, drawn from all ground truth."""
    if split not in ("train", "valid", "test"):
        raise InvalidArgumentError(f"unknown split '{split}'")
    history = dataset.all_snapshots()
    return list(history_windows(history, params.config.m, dataset.snapshots(split)))


def evaluate(
    params: EthParams,
    dataset: TkgDataset,
    split: str = "test",
    setting: FilterSetting = FilterSetting.TIME,
    workers: Optional[int] = None,
) -> RankReport:
    """Rank every fact of a split and its inverse against all entities."""
    setting = FilterSetting(setting)
    windows = evaluation_windows(params, dataset, split)
    with EvaluationPool(workers) as pool:
        parts = pool.map_ordered(lambda w: rank_window(params, w, setting), windows)
    report = RankReport.concat(parts, setting)
    logger.info(
        f"{split} ({setting.value} filter): {report.count} queries, "
        f"MRR {report.mrr:.4f}, H@1 {report.hits(1):.4f}, H@10 {report.hits(10):.4f}"
    )
    return report
