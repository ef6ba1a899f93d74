import socket
import subprocess
import sys
import time

import numpy as np
import pytest

from avrisk.harness import BatchError, EvalPool, PoolConfig, hash64, make_pool
from avrisk.naive import estimate_naive
from avrisk.objectives import FirstCoordinate, GaussianLinear, HighwayObjective
from avrisk.params import desk_space, gaussian_space
from avrisk.protocol import EvalRequest

ECHO = (sys.executable, "-m", "avrisk.echo_sim")


def requests(n, d=3, seed=0, start=0):
    rng = np.random.default_rng(seed)
    U = rng.standard_normal((n, d))
    return [EvalRequest(start + i, hash64(0, start + i), tuple(U[i]), tuple(U[i] * 10)) for i in range(n)]


def echo_pool(*flags, n_workers=2, **kw):
    return EvalPool(PoolConfig(n_workers=n_workers, backend="external", command=ECHO + flags, **kw))


def test_single_request_in_process():
    with make_pool(FirstCoordinate()) as pool:
        out = pool.submit_batch([EvalRequest(41, 5, (0.1,), (2.5,))])
    assert len(out) == 1 and out[0].id == 41 and out[0].objective == 2.5
    assert pool.n_evals == 1


def test_worker_count_invariance_in_process():
    sp = desk_space()
    U, X = sp.sample(np.random.default_rng(0), 1000)
    obj = HighwayObjective()
    a = make_pool(obj, 1).evaluate(U, X)
    b = make_pool(obj, 8).evaluate(U, X)
    assert np.array_equal(a, b)


def test_responses_sorted_by_id():
    reqs = requests(20)
    out = make_pool(FirstCoordinate(), 4).submit_batch(list(reversed(reqs)))
    assert [r.id for r in out] == list(range(20))
    with pytest.raises(ValueError):
        make_pool(FirstCoordinate()).submit_batch(reqs[:2] + reqs[:1])


def test_in_process_retries_count_once():
    class Flaky:
        calls = 0

        def evaluate_batch(self, U, X):
            Flaky.calls += 1
            if Flaky.calls == 1:
                raise RuntimeError("transient")
            return X[:, 0]

    pool = make_pool(Flaky(), max_retries=1)
    out = pool.evaluate(np.zeros((5, 1)), np.arange(5.0)[:, None])
    assert out.tolist() == [0, 1, 2, 3, 4] and pool.n_retries == 1 and pool.n_evals == 5

    class Broken:
        def evaluate_batch(self, U, X):
            raise RuntimeError("always")

    with pytest.raises(BatchError):
        make_pool(Broken(), max_retries=2).evaluate(np.zeros((2, 1)), np.zeros((2, 1)))


def test_hash64():
    assert hash64(1, 2) == hash64(1, 2)
    assert len({hash64(0, i) for i in range(1000)}) == 1000
    assert hash64(0, 5) != hash64(1, 5)
    assert 0 <= hash64(2**63, 2**63) < 2**64


def test_pool_config_validation():
    with pytest.raises(ValueError):
        PoolConfig(n_workers=0)
    with pytest.raises(ValueError):
        PoolConfig(timeout_ms=0)
    with pytest.raises(ValueError):
        PoolConfig(backend="external")
    with pytest.raises(ValueError):
        EvalPool(PoolConfig())


def test_echo_over_pipes():
    reqs = requests(300)
    with echo_pool(n_workers=3) as pool:
        out = pool.submit_batch(reqs)
        assert [r.id for r in out] == [r.id for r in reqs]
        assert [r.objective for r in out] == [r.scenario[0] for r in reqs]
        assert pool.n_evals == 300 and pool.n_retries == 0
        assert pool.max_in_flight <= 3 * pool.cfg.queue_depth


@pytest.mark.parametrize("flags", [("--crash-after", "7"), ("--garble-after", "5")])
def test_faults_are_retried(flags):
    reqs = requests(120, seed=1)
    with echo_pool(*flags, n_workers=2, max_retries=5, timeout_ms=5000) as pool:
        out = pool.submit_batch(reqs)
    assert [r.objective for r in out] == [r.scenario[0] for r in reqs]
    assert pool.n_retries > 0
    # retried requests are counted once
    assert pool.n_evals == 120


def test_crash_beyond_retries_is_a_batch_error():
    with echo_pool("--crash-after", "0", n_workers=1, max_retries=1, timeout_ms=5000) as pool:
        with pytest.raises(BatchError):
            pool.submit_batch(requests(3))


def test_timeout_is_enforced():
    with echo_pool("--delay-ms", "1000", n_workers=1, max_retries=0, timeout_ms=100) as pool:
        t0 = time.perf_counter()
        with pytest.raises(BatchError):
            pool.submit_batch(requests(2))
        assert time.perf_counter() - t0 < 5


def test_backpressure_bound():
    with echo_pool("--delay-ms", "2", n_workers=2, queue_depth=3) as pool:
        pool.submit_batch(requests(60))
        assert 1 <= pool.max_in_flight <= 6


def _free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_echo_over_tcp():
    port = _free_port()
    proc = subprocess.Popen(ECHO + ("--listen", f"127.0.0.1:{port}"))
    try:
        for _ in range(100):
            try:
                socket.create_connection(("127.0.0.1", port), timeout=0.1).close()
                break
            except OSError:
                time.sleep(0.05)
        cfg = PoolConfig(n_workers=4, backend="external", address=f"127.0.0.1:{port}")
        reqs = requests(200, seed=2)
        with EvalPool(cfg) as pool:
            out = pool.submit_batch(reqs)
        assert [r.objective for r in out] == [r.scenario[0] for r in reqs]
    finally:
        proc.terminate()
        proc.wait(5)


def test_estimator_through_external_backend_matches_in_process():
    sp = gaussian_space(4)
    obj = FirstCoordinate()
    with echo_pool(n_workers=2) as ext:
        a = estimate_naive(obj, sp, 500, -1.0, ext, seed=3)
    b = estimate_naive(obj, sp, 500, -1.0, make_pool(obj, 1), seed=3)
    assert a.p_hat == b.p_hat and a.n_hits == b.n_hits and a.n_evals == b.n_evals == 500


def test_exactly_once_across_batches():
    pool = make_pool(GaussianLinear.axis(2), 4)
    for n in (1, 17, 250):
        U = np.zeros((n, 2))
        pool.evaluate(U, U)
    assert pool.n_evals == 268
