import asyncio
import logging
from typing import Any, Awaitable, Callable, Generic, List, Optional, TypeVar

T = TypeVar("T")  # Input type
R = TypeVar("R")  # Return type

logger = logging.getLogger(__name__)


class AsyncExecutor(Generic[T, R]):
    """
    Runs a CPU-bound callable over a list of inputs on worker threads, with at most
    `max_concurrent_tasks` in flight. Results come back in input order; the first
    failure is re-raised once every task has settled.
    """
    def __init__(self, max_concurrent_tasks: Optional[int] = None):
        """
        Initializes the AsyncExecutor.

        Args:
            max_concurrent_tasks (Optional[int]): Maximum number of concurrent tasks. Defaults to 1.
        """
        self.max_concurrent_tasks = max_concurrent_tasks or 1

    async def execute(
        self,
        tasks: List[T],
        task_func: Callable[..., R],
        *args,
        **kwargs,
    ) -> List[R]:
        """
        Executes tasks concurrently, offloading each call with asyncio.to_thread.

        Args:
            tasks (List[T]): A list of task inputs.
            task_func (Callable[..., R]): The synchronous function to execute for each task.
            *args: Additional positional arguments to pass to task_func.
            **kwargs: Additional keyword arguments to pass to task_func.

        Returns:
            List[R]: A list of results from the executed tasks, in input order.
        """
        logger.info(
            f"Processing {len(tasks)} tasks with up to {self.max_concurrent_tasks} concurrent tasks."
        )
        semaphore = asyncio.Semaphore(self.max_concurrent_tasks)

        async def sem_task(task: T) -> R:
            async with semaphore:
                # worker threads have no running loop, so task_func may call run_async itself
                return await asyncio.to_thread(task_func, task, *args, **kwargs)

        coroutines: List[Awaitable[R]] = [sem_task(task) for task in tasks]
        results = await asyncio.gather(*coroutines, return_exceptions=True)

        failures = [(task, r) for task, r in zip(tasks, results) if isinstance(r, BaseException)]
        for task, error in failures:
            logger.error(f"Error processing task {task}: {error}")
        if failures:
            raise failures[0][1]

        logger.debug("All tasks have been processed.")
        return list(results)


def chunk_list(data: List[Any], chunk_size: int) -> List[List[Any]]:
    return [data[i: i + chunk_size] for i in range(0, len(data), chunk_size)]


def run_async(coro: Awaitable[Any]) -> Any:
    try:
        asyncio.get_running_loop()
    except RuntimeError:
        return asyncio.run(coro)
    raise RuntimeError("run_async cannot be called from a running event loop")
