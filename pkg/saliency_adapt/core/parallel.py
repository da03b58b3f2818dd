from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def default_workers() -> int:
    env_value = os.getenv("SALIENCY_ADAPT_WORKERS")
    if env_value:
        return max(1, int(env_value))
    return os.cpu_count() or 1


def ordered_map(fn: Callable[[T], R], items: Iterable[T], workers: int = 1) -> list[R]:
    """Map ``fn`` over ``items`` and return results in input order.

    numpy releases the GIL inside its kernels, so threads give real overlap
    for the array-heavy callables used here. Reductions over the returned
    list stay in input order whatever ``workers`` is.
    """
    materialized = list(items)
    if workers <= 1 or len(materialized) <= 1:
        return [fn(item) for item in materialized]
    with ThreadPoolExecutor(max_workers=min(workers, len(materialized))) as executor:
        return list(executor.map(fn, materialized))
