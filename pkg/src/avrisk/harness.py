"""Deterministic batch evaluation of objectives.

Callers hand the pool a batch and get back every result ordered by request
id. Work runs either in-process (threads over contiguous chunks, the
objective evaluated vectorised) or in external simulator processes speaking
the newline-delimited JSON protocol over pipes or TCP.
"""
from __future__ import annotations

import hashlib
import logging
import queue
import shlex
import socket
import subprocess
import threading
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from avrisk.protocol import (EvalRequest, EvalResponse, ProtocolError, decode_response,
                             encode_request)

log = logging.getLogger(__name__)


class BatchError(RuntimeError):
    """A batch could not be completed within the retry budget."""


def hash64(master_seed: int, request_id: int) -> int:
    data = int(master_seed).to_bytes(8, "little", signed=False) + \
        int(request_id).to_bytes(8, "little", signed=False)
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


@dataclass(frozen=True)
class PoolConfig:
    n_workers: int = 1
    backend: str = "in_process"  # or "external"
    command: tuple | None = None  # external simulator argv
    address: str | None = None  # external simulator host:port
    timeout_ms: int = 60_000
    max_retries: int = 2
    queue_depth: int = 4

    def __post_init__(self):
        if self.n_workers < 1:
            raise ValueError("n_workers must be >= 1")
        if self.timeout_ms <= 0:
            raise ValueError("timeout_ms must be positive")
        if self.queue_depth < 1 or self.max_retries < 0:
            raise ValueError("queue_depth >= 1 and max_retries >= 0 required")
        if self.backend not in ("in_process", "external"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.backend == "external" and (self.command is None) == (self.address is None):
            raise ValueError("external backend needs exactly one of command or address")


# ---------------------------------------------------------------------------
# external channels


class ChannelError(RuntimeError):
    pass


class _LineChannel:
    """Line-oriented duplex stream with a reader thread for timed reads."""

    def _start_reader(self, stream):
        self._lines: queue.Queue = queue.Queue()

        def pump():
            try:
                for line in stream:
                    self._lines.put(line)
            except (OSError, ValueError):
                pass
            self._lines.put(None)

        threading.Thread(target=pump, daemon=True).start()

    def readline(self, timeout: float) -> str:
        try:
            line = self._lines.get(timeout=timeout)
        except queue.Empty:
            raise ChannelError("timed out waiting for a response") from None
        if line is None:
            raise ChannelError("worker closed its output")
        return line


class ProcessChannel(_LineChannel):
    def __init__(self, argv):
        self.proc = subprocess.Popen(list(argv), stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                                     stderr=subprocess.DEVNULL, text=True, bufsize=1)
        self._start_reader(self.proc.stdout)

    def send(self, lines: list[str]) -> None:
        try:
            self.proc.stdin.write("".join(l + "\n" for l in lines))
            self.proc.stdin.flush()
        except (BrokenPipeError, OSError, ValueError) as exc:
            raise ChannelError(f"worker pipe closed: {exc}") from exc

    def close(self) -> None:
        try:
            self.proc.stdin.close()
        except OSError:
            pass
        try:
            self.proc.wait(timeout=2)
        except subprocess.TimeoutExpired:
            self.proc.kill()
            self.proc.wait()


class TcpChannel(_LineChannel):
    def __init__(self, address: str):
        host, port = address.rsplit(":", 1)
        self.sock = socket.create_connection((host, int(port)))
        self.rfile = self.sock.makefile("r", encoding="utf-8", newline="\n")
        self._start_reader(self.rfile)

    def send(self, lines: list[str]) -> None:
        try:
            self.sock.sendall("".join(l + "\n" for l in lines).encode("utf-8"))
        except OSError as exc:
            raise ChannelError(f"socket closed: {exc}") from exc

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


# ---------------------------------------------------------------------------
# pool


class EvalPool:
    """Synchronous batch interface over concurrent workers.

    ``n_evals`` counts unique request ids; retried requests count once.
    In-process timeouts are not enforced (threads cannot be cancelled); the
    external backend enforces ``timeout_ms`` per response.
    """

    def __init__(self, cfg: PoolConfig | None = None, objective=None, master_seed: int = 0):
        self.cfg = cfg or PoolConfig()
        if self.cfg.backend == "in_process" and objective is None:
            raise ValueError("in-process backend needs an objective")
        self.objective = objective
        self.master_seed = int(master_seed)
        self.n_evals = 0
        self.n_retries = 0
        self.max_in_flight = 0
        self._next_id = 0
        self._channels: list = [None] * self.cfg.n_workers
        self._executor = None

    # -- lifecycle

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def close(self) -> None:
        for i, ch in enumerate(self._channels):
            if ch is not None:
                ch.close()
                self._channels[i] = None
        if self._executor is not None:
            self._executor.shutdown()
            self._executor = None

    # -- array interface

    def reserve_ids(self, n: int) -> range:
        ids = range(self._next_id, self._next_id + n)
        self._next_id += n
        return ids

    def evaluate(self, U, X) -> np.ndarray:
        """Evaluate rows of (latent, scenario); results in row order."""
        U = np.atleast_2d(np.asarray(U, dtype=float))
        X = np.atleast_2d(np.asarray(X, dtype=float))
        n = U.shape[0]
        if X.shape[0] != n:
            raise ValueError("latent and scenario batches differ in length")
        if n == 0:
            return np.empty(0)
        ids = self.reserve_ids(n)
        if self.cfg.backend == "external":
            reqs = [EvalRequest(i, hash64(self.master_seed, i), tuple(U[k].tolist()),
                                tuple(X[k].tolist())) for k, i in enumerate(ids)]
            return np.array([r.objective for r in self._run_external(reqs)])
        out = self._run_in_process(U, X)
        self.n_evals += n
        return out

    # -- request interface

    def submit_batch(self, requests: list[EvalRequest]) -> list[EvalResponse]:
        ids = [r.id for r in requests]
        if len(set(ids)) != len(ids):
            raise ValueError("request ids must be unique within a batch")
        if not requests:
            return []
        order = sorted(range(len(requests)), key=lambda k: requests[k].id)
        requests = [requests[k] for k in order]
        self._next_id = max(self._next_id, requests[-1].id + 1)
        if self.cfg.backend == "external":
            return self._run_external(requests)
        U = np.array([r.latent for r in requests], dtype=float)
        X = np.array([r.scenario for r in requests], dtype=float)
        t0 = time.perf_counter()
        f = self._run_in_process(U, X)
        wall = int((time.perf_counter() - t0) * 1000 / len(requests))
        self.n_evals += len(requests)
        return [EvalResponse(r.id, float(v), wall) for r, v in zip(requests, f)]

    # -- in-process

    def _call_with_retries(self, U, X):
        last = None
        for attempt in range(self.cfg.max_retries + 1):
            try:
                return np.asarray(self.objective.evaluate_batch(U, X), dtype=float)
            except Exception as exc:  # noqa: BLE001 - any worker fault is retried
                last = exc
                if attempt < self.cfg.max_retries:
                    self.n_retries += 1
                    log.warning("evaluation failed (%s); retrying", exc)
        raise BatchError(f"evaluation failed after {self.cfg.max_retries} retries: {last}") from last

    def _run_in_process(self, U, X):
        n = U.shape[0]
        w = self.cfg.n_workers
        if w == 1 or n == 1:
            self.max_in_flight = max(self.max_in_flight, 1)
            return self._call_with_retries(U, X)
        if self._executor is None:
            self._executor = ThreadPoolExecutor(max_workers=w)
        bounds = np.linspace(0, n, min(n, w) + 1).astype(int)
        futures = [self._executor.submit(self._call_with_retries, U[a:b], X[a:b])
                   for a, b in zip(bounds[:-1], bounds[1:])]
        self.max_in_flight = max(self.max_in_flight, len(futures))
        return np.concatenate([f.result() for f in futures])

    # -- external

    def _open_channel(self):
        if self.cfg.command is not None:
            argv = self.cfg.command
            if isinstance(argv, str):
                argv = shlex.split(argv)
            return ProcessChannel(argv)
        return TcpChannel(self.cfg.address)

    def _run_external(self, requests: list[EvalRequest]) -> list[EvalResponse]:
        pending = deque((r, 0) for r in requests)
        results: dict[int, EvalResponse] = {}
        lock = threading.Lock()
        failure: list[BaseException] = []
        in_flight_total = [0]
        depth = self.cfg.queue_depth
        timeout = self.cfg.timeout_ms / 1000.0

        def worker(slot: int):
            inflight: dict[int, tuple] = {}
            while True:
                with lock:
                    if failure:
                        return
                    batch = []
                    while pending and len(inflight) + len(batch) < depth:
                        batch.append(pending.popleft())
                    if not batch and not inflight:
                        return
                    in_flight_total[0] += len(batch)
                    self.max_in_flight = max(self.max_in_flight, in_flight_total[0])
                for item in batch:
                    inflight[item[0].id] = item
                try:
                    ch = self._channels[slot]
                    if ch is None:
                        ch = self._channels[slot] = self._open_channel()
                    if batch:
                        ch.send([encode_request(r) for r, _ in batch])
                    resp = decode_response(ch.readline(timeout))
                    if resp.id not in inflight:
                        raise ProtocolError(f"response for unexpected id {resp.id}")
                    del inflight[resp.id]
                    with lock:
                        results[resp.id] = resp
                        in_flight_total[0] -= 1
                except (ChannelError, ProtocolError, OSError) as exc:
                    log.warning("worker %d failed: %s; restarting", slot, exc)
                    if self._channels[slot] is not None:
                        self._channels[slot].close()
                        self._channels[slot] = None
                    with lock:
                        in_flight_total[0] -= len(inflight)
                        for r, tries in sorted(inflight.values(), key=lambda it: -it[0].id):
                            if tries + 1 > self.cfg.max_retries:
                                failure.append(BatchError(
                                    f"request {r.id} failed after {self.cfg.max_retries} retries: {exc}"))
                                return
                            self.n_retries += 1
                            pending.appendleft((r, tries + 1))
                    inflight.clear()

        threads = [threading.Thread(target=worker, args=(k,), daemon=True)
                   for k in range(self.cfg.n_workers)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if failure:
            raise failure[0]
        self.n_evals += len(requests)
        return [results[r.id] for r in requests]


def make_pool(objective=None, n_workers: int = 1, master_seed: int = 0, **kw) -> EvalPool:
    return EvalPool(PoolConfig(n_workers=n_workers, **kw), objective, master_seed)
