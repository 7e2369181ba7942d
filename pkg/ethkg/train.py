"""
Training loop for ETH: one Adam step per target timestamp, validation MRR
after every epoch, early stopping on patience.
"""

from dataclasses import (
    asdict,
    dataclass,
    field,
)
import json
import logging
import math
from pathlib import Path
import time
from typing import (
    Callable,
    Dict,
    List,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np

from ethkg import diffcore as dc
from ethkg.data import (
    HistoryWindow,
    Snapshot,
    TkgDataset,
    history_windows,
)
from ethkg.diffcore import (
    AdamState,
    Node,
    Tape,
)
from ethkg.errors import (
    DataError,
    NumericError,
)
from ethkg.evaluation import (
    answer_matrix,
    evaluate,
)
from ethkg.model import (
    EthParams,
    QueryBatch,
    forward,
    save_checkpoint,
)
from ethkg.system_config import (
    FilterSetting,
    LossKind,
    TrainConfig,
)


logger = logging.getLogger("ethkg.train")

Validator = Callable[[EthParams], float]


def compute_loss(
    logits: Node,
    queries: QueryBatch,
    loss_kind: LossKind = LossKind.SOFTMAX_CE,
) -> Node:
    """Scalar training loss over a batch of scored queries.

    softmax_ce uses each query's own gold; binary_ce labels every gold object
    of the same (q, r) in the batch as positive.
    """
    if LossKind(loss_kind) is LossKind.SOFTMAX_CE:
        return dc.softmax_cross_entropy(logits, queries.targets)
    labels = answer_matrix(queries, logits.shape[1]).astype(np.float64)
    return dc.binary_cross_entropy_with_logits(logits, labels)


def clip_global_norm(grads: Dict[str, np.ndarray], max_norm: Optional[float]) -> float:
    """Rescale all gradients in place so their joint L2 norm is at most max_norm.

    Returns the norm before clipping.
    """
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


@dataclass
class TrainState:
    """Optimizer moments and the random stream driving RReLU slopes"""

    adam: AdamState
    rng: np.random.Generator

    @classmethod
    def create(cls, seed: int) -> "TrainState":
        return cls(AdamState(), np.random.default_rng(seed))


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_mrr: float
    seconds: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass
class FitResult:
    """Best parameters found and the per-epoch log"""

    params: EthParams
    best_epoch: int
    best_val_mrr: float
    log: List[EpochLog] = field(default_factory=list)


def train_step(
    params: EthParams, window: HistoryWindow, config: TrainConfig, state: TrainState
) -> float:
    """Forward, backward and one Adam update on a single target snapshot."""
    target = window.target
    queries = QueryBatch.from_snapshot(target)
    tape = Tape()
    try:
        result = forward(
            params, window, queries, tape=tape, training=True, rng=state.rng
        )
        loss = compute_loss(result.logits, queries, params.config.loss_kind)
    except NumericError as e:
        raise NumericError(f"timestamp {target.time}: {e}") from e
    value = float(loss.value)
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss at timestamp {target.time}")

    grads = dc.backward(tape, loss)
    clip_global_norm(grads, config.grad_clip_norm)
    dc.adam_step(
        params.tensors,
        grads,
        state.adam,
        lr=config.lr,
        beta1=config.beta1,
        beta2=config.beta2,
        eps=config.eps,
    )
    if not params.all_finite():
        raise NumericError(
            f"non-finite parameters after update at timestamp {target.time}"
        )
    return value


def train_epoch(
    params: EthParams,
    train_snapshots: Sequence[Snapshot],
    config: TrainConfig,
    state: TrainState,
) -> Tuple[EthParams, float]:
    """One chronological pass over the training snapshots.

    Returns the (in-place updated) parameters and the mean per-timestamp loss.
    """
    if not train_snapshots:
        raise DataError("training needs at least one target snapshot")
    losses = [
        train_step(params, window, config, state)
        for window in history_windows(train_snapshots, params.config.m, train_snapshots)
    ]
    return params, float(np.mean(losses))


def validation_mrr(dataset: TkgDataset, workers: Optional[int] = None) -> Validator:
    """Time-filtered MRR on the validation split."""

    def validate(params: EthParams) -> float:
        return evaluate(params, dataset, "valid", FilterSetting.TIME, workers).mrr

    return validate


def fit(
    params: EthParams,
    dataset: TkgDataset,
    config: TrainConfig,
    validate: Optional[Validator] = None,
    log_path: Optional[Union[str, Path]] = None,
    checkpoint_path: Optional[Union[str, Path]] = None,
    workers: Optional[int] = None,
) -> FitResult:
    """Train until max_epochs or until validation MRR stops improving.

    Args:
        params: Starting parameters, updated in place while training
        dataset: Train split drives updates; valid split drives early stopping
        config: Optimizer and schedule settings
        validate: Replaces the validation MRR computation when given
        log_path: JSON-lines training log, one object per epoch
        checkpoint_path: Rewritten every time validation MRR improves
        workers: Evaluation threads for validation

    Returns:
        The best parameters with their epoch and the full log
    """
    if validate is None:
        if dataset.valid.shape[0] == 0:
            raise DataError("early stopping needs a non-empty validation split")
        validate = validation_mrr(dataset, workers)

    train_snapshots = dataset.snapshots("train")
    state = TrainState.create(config.seed)
    log_file = Path(log_path) if log_path is not None else None
    if log_file is not None:
        log_file.parent.mkdir(parents=True, exist_ok=True)
        log_file.write_text("")

    best = FitResult(params.copy(), 0, -math.inf)
    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        start = time.perf_counter()
        params, train_loss = train_epoch(params, train_snapshots, config, state)
        val_mrr = float(validate(params))
        entry = EpochLog(epoch, train_loss, val_mrr, time.perf_counter() - start)
        best.log.append(entry)
        if log_file is not None:
            with open(log_file, "a") as f:
                f.write(entry.to_json() + "\n")
        logger.info(
            f"epoch {epoch}: loss {train_loss:.5f}, val MRR {val_mrr:.4f}, "
            f"{entry.seconds:.1f}s"
        )

        if val_mrr > best.best_val_mrr:
            best.params = params.copy()
            best.best_epoch = epoch
            best.best_val_mrr = val_mrr
            stale = 0
            if checkpoint_path is not None:
                extra = {"epoch": epoch, "val_mrr": val_mrr}
                save_checkpoint(checkpoint_path, best.params, extra)
        else:
            stale += 1
            if stale >= config.patience:
                logger.info(
                    f"Early stopping after epoch {epoch}, best epoch {best.best_epoch}"
                )
                break
    return best
