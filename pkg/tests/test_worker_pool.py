import threading
import time

import worker_pool


def _slow_square(value: int) -> int:
    # later items finish first
    time.sleep(0.001 * (10 - value))
    return value * value


def test_results_come_back_in_submission_order():
    with worker_pool.Pool(workers=4) as pool:
        assert pool.map_ordered(_slow_square, range(10)) == [v * v for v in range(10)]


def test_single_worker_runs_inline():
    pool = worker_pool.Pool(workers=1)
    threads = pool.map_ordered(lambda _: threading.current_thread(), range(3))
    assert all(thread is threading.main_thread() for thread in threads)
    pool.shutdown()


def test_jobs_run_on_worker_threads():
    with worker_pool.Pool(workers=2) as pool:
        names = pool.map_ordered(lambda _: threading.current_thread().name, range(4))
    assert all(name.startswith("worker_pool") for name in names)


def test_empty_and_single_item():
    with worker_pool.Pool(workers=3) as pool:
        assert pool.map_ordered(_slow_square, []) == []
        assert pool.map_ordered(_slow_square, [3]) == [9]


def test_shutdown_is_idempotent():
    pool = worker_pool.Pool(workers=2)
    pool.shutdown()
    pool.shutdown()
    assert pool.map_ordered(_slow_square, [1, 2]) == [1, 4]
