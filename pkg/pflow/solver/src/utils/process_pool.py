from __future__ import annotations
import multiprocessing as mp
from typing import Any, Callable, List, Optional, Sequence, Tuple

import psutil
from tqdm import tqdm

from utils.config import solver_config
from utils.logger import get_logger

logger = get_logger(__name__)

Job = Tuple[Callable[..., Any], tuple]


class LevelPool:
    """Runs independent jobs (study levels) and returns results in submission order"""

    def __init__(self, max_workers: Optional[int] = None, progress: bool = False):
        cpus = psutil.cpu_count(logical=False) or mp.cpu_count()
        cap = solver_config.max_threads
        if max_workers is None:
            max_workers = min(cpus, cap) if cap else cpus
        self.max_workers = max(1, int(max_workers))
        self.progress = progress
        self.logger = logger

    def _bar(self, items, total: int):
        return tqdm(items, total=total, desc='levels', unit='level', disable=not self.progress)

    def run(self, jobs: Sequence[Job]) -> List[Any]:
        """Execute jobs; a failing job re-raises its exception in the caller"""
        workers = min(self.max_workers, len(jobs))
        if workers <= 1:
            self.logger.debug(f"Running {len(jobs)} jobs in-process")
            return [func(*args) for func, args in self._bar(jobs, len(jobs))]

        self.logger.info(f"Starting process pool with {workers} workers for {len(jobs)} jobs")
        try:
            with mp.Pool(processes=workers) as pool:
                handles = [pool.apply_async(func, args) for func, args in jobs]
                return [handle.get() for handle in self._bar(handles, len(handles))]
        except Exception as e:
            self.logger.error(f"Process pool job failed: {str(e)}")
            raise

    def get_pool_status(self) -> dict:
        return {
            'max_workers': self.max_workers,
            'cpu_percent': psutil.cpu_percent(interval=None),
            'memory_percent': psutil.virtual_memory().percent
        }
