import logging
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from optypes.match_types import SweepConfig, SweepMode
from util.utils import AsyncExecutor, chunk_list, run_async

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MeshPair:
    """Two meshes to sample and match; `gt_path` maps A vertices onto B vertices."""

    source_a: str
    source_b: str
    gt_path: Optional[str] = None

    @property
    def is_self_pair(self) -> bool:
        return self.source_a == self.source_b and self.gt_path is None

    @property
    def label(self) -> str:
        return self.source_a if self.is_self_pair else f"{self.source_a} -> {self.source_b}"


@dataclass(frozen=True)
class SweepTrial:
    source: str
    mode: SweepMode
    points: int
    noise: float
    seed: int


@dataclass(frozen=True)
class SweepCell:
    mode: SweepMode
    points: int
    noise: float
    mean_accuracy: float
    std: float
    trials: int

    def as_row(self) -> Dict[str, object]:
        return {
            "mode": self.mode.value,
            "points": self.points,
            "noise": self.noise,
            "mean_accuracy": f"{self.mean_accuracy:.6f}",
            "std": f"{self.std:.6f}",
            "trials": self.trials,
        }


class SweepRunner:
    """Runs every (pair, mode, density, noise, seed) trial and averages per cell."""

    def __init__(self, config: SweepConfig, max_workers: int = 1, chunk_size: int = 8):
        self.config = config
        self.chunk_size = chunk_size
        self.executor = AsyncExecutor(max_concurrent_tasks=max_workers)

    def trials(self, labels: List[str]) -> List[SweepTrial]:
        return [
            SweepTrial(label, mode, points, noise, self.config.base_seed + t)
            for label in labels
            for mode in self.config.modes
            for points in self.config.densities
            for noise in self.config.noise_levels
            for t in range(self.config.trials)
        ]

    def run(self, labels: List[str], trial_func: Callable[[SweepTrial], float]) -> List[SweepCell]:
        trials = self.trials(labels)
        chunks = chunk_list(trials, self.chunk_size)
        logger.info(f"Processing {len(trials)} sweep trials in {len(chunks)} chunks")

        accuracies: List[float] = []
        for chunk in chunks:
            start_time = time.perf_counter()
            accuracies += run_async(self.executor.execute(tasks=chunk, task_func=trial_func))
            elapsed_time = time.perf_counter() - start_time
            logger.info(f"Processed chunk of {len(chunk)} trials in {elapsed_time:.2f} seconds.")

        return self.summarize(trials, accuracies)

    def summarize(self, trials: List[SweepTrial], accuracies: List[float]) -> List[SweepCell]:
        grouped: Dict[Tuple[SweepMode, int, float], List[float]] = {}
        for trial, accuracy in zip(trials, accuracies):
            grouped.setdefault((trial.mode, trial.points, trial.noise), []).append(accuracy)
        return [
            SweepCell(mode, points, noise, float(np.mean(values)), float(np.std(values)), len(values))
            for (mode, points, noise), values in grouped.items()
        ]
