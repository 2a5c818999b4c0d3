from typing import Callable, Iterable, List, TypeVar

from joblib import Parallel, delayed


T = TypeVar("T")
R = TypeVar("R")


def parallel_map(fn: Callable[[T], R], items: Iterable[T], workers: int = 1) -> List[R]:
    """Ordered map over a thread pool; results never depend on ``workers``."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    return Parallel(n_jobs=workers, prefer="threads")(delayed(fn)(item) for item in items)
