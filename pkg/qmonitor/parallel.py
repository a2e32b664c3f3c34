"""Ordered worker pool shared by sweeps and ensembles."""
import logging
from collections.abc import Callable, Iterable, Sequence
from concurrent.futures import ProcessPoolExecutor
from typing import Any

from tqdm import tqdm

logger = logging.getLogger(__name__)


def run_ordered(
    fn: Callable[[Any], Any],
    items: Sequence[Any],
    workers: int = 1,
    desc: str | None = None,
) -> list[Any]:
    """Map fn over items, returning results in input order whatever the worker count."""
    from qmonitor.config import Config  # config imports the engines

    progress = Config.progress_enabled() and desc is not None
    if workers <= 1 or len(items) <= 1:
        iterator: Iterable[Any] = map(fn, items)
        return list(tqdm(iterator, total=len(items), desc=desc, disable=not progress))

    logger.info(f"Running {len(items)} tasks on {workers} workers")
    with ProcessPoolExecutor(max_workers=workers) as executor:
        results = executor.map(fn, items)
        return list(tqdm(results, total=len(items), desc=desc, disable=not progress))
