import logging
import multiprocessing
import threading
import typing
from collections import OrderedDict
from concurrent.futures.thread import ThreadPoolExecutor

T = typing.TypeVar("T")
R = typing.TypeVar("R")


class Pool:
    """
    Runs independent jobs on a fixed set of worker threads and hands results
    back in submission order, so callers reduce them in a fixed order no
    matter how many workers there are.
    """

    def __init__(self, workers: typing.Optional[int] = None):
        self._logger = logging.getLogger(__name__)
        self.worker_count = workers or multiprocessing.cpu_count()
        self._lock = threading.Lock()
        self._executor = None
        if self.worker_count > 1:
            self._logger.info("Creating with %i workers", self.worker_count)
            self._executor = ThreadPoolExecutor(
                max_workers=self.worker_count, thread_name_prefix=__name__
            )
        else:
            self._logger.debug("Single worker, jobs run inline")

    def map_ordered(
        self, func: typing.Callable[[T], R], items: typing.Iterable[T]
    ) -> typing.List[R]:
        items = list(items)
        if self._executor is None or len(items) < 2:
            return [func(item) for item in items]

        results = OrderedDict()
        with self._lock:
            for position, item in enumerate(items):
                self._logger.debug("Queueing job %i", position)
                results[position] = self._executor.submit(func, item)
        return [future.result() for future in results.values()]

    def shutdown(self):
        if self._executor is not None:
            self._logger.debug("Waiting on workers")
            self._executor.shutdown(wait=True)
            self._executor = None
        self._logger.debug("Shutdown complete")

    def __enter__(self):
        return self

    def __exit__(self, *_):
        self.shutdown()

    def __del__(self):
        self.shutdown()


INLINE = Pool(workers=1)
