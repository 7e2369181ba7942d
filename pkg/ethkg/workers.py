from concurrent.futures import ThreadPoolExecutor
import logging
from typing import (
    Callable,
    Iterable,
    List,
    Optional,
    TypeVar,
)

from ethkg.errors import InvalidArgumentError
from ethkg.load_environment import get_env
from ethkg.system_config import default_workers


T = TypeVar("T")
R = TypeVar("R")

logger = logging.getLogger("ethkg.workers")


def resolve_workers(requested: Optional[int] = None) -> int:
    """Get the evaluation thread count: explicit value, then ETH_NUM_WORKERS."""
    if requested:
        if requested < 0:
            raise InvalidArgumentError("worker count must be >= 0")
        return requested
    raw = get_env("ETH_NUM_WORKERS")
    try:
        value = int(raw)
    except ValueError as e:
        raise InvalidArgumentError(
            f"ETH_NUM_WORKERS must be an integer, got '{raw}'"
        ) from e
    return value if value > 0 else default_workers()


class EvaluationPool:
    """Scores independent work items concurrently against frozen parameters"""

    def __init__(self, workers: Optional[int] = None):
        self.workers = resolve_workers(workers)
        self._executor: Optional[ThreadPoolExecutor] = None
        if self.workers > 1:
            self._executor = ThreadPoolExecutor(
                max_workers=self.workers, thread_name_prefix="eval"
            )

    def map_ordered(self, func: Callable[[T], R], items: Iterable[T]) -> List[R]:
        """Apply func to every item; results keep the input order.

        The first exception raised by any item is re-raised here.
        """
        items = list(items)
        if self._executor is None or len(items) < 2:
            return [func(item) for item in items]
        logger.debug(f"Scoring {len(items)} items on {self.workers} threads")
        return list(self._executor.map(func, items))

    def cleanup(self):
        """Shut the executor down"""
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None

    def __enter__(self) -> "EvaluationPool":
        return self

    def __exit__(self, *exc) -> None:
        self.cleanup()
