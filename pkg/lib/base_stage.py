import logging
import time
from typing import Any, Callable, Dict, TypeVar

logger = logging.getLogger(__name__)

T = TypeVar("T")


class StageError(Exception):
    """Raised when a pipeline stage fails; carries the stage name and the cause"""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"Stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


class StageRunner:
    """Runs named pipeline stages, timing each one and wrapping its errors"""

    def __init__(self, pipeline: str):
        """
        Args:
            pipeline: Name used in log lines (e.g., "match", "self")
        """
        self.pipeline = pipeline
        self.timings: Dict[str, float] = {}
        self._started = time.perf_counter()

    def run(self, stage: str, func: Callable[..., T], *args: Any, **kwargs: Any) -> T:
        """Execute one stage with standard timing and error handling

        Args:
            stage: Stage name recorded in the timings and in errors
            func: The callable doing the work
        """
        logger.info(f"[{self.pipeline}] {stage} ...")
        start = time.perf_counter()
        try:
            return func(*args, **kwargs)
        except StageError:
            raise
        except Exception as e:
            logger.error(f"[{self.pipeline}] {stage} failed: {e}")
            raise StageError(stage, e) from e
        finally:
            elapsed = time.perf_counter() - start
            self.timings[stage] = self.timings.get(stage, 0.0) + elapsed
            logger.info(f"[{self.pipeline}] {stage} took {elapsed:.2f} seconds")

    @property
    def total_time(self) -> float:
        return time.perf_counter() - self._started
