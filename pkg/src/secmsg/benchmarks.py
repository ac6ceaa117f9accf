"""Measurement harness: ping-pong, windowed multi-pair, collective and
encrypt-decrypt benchmarks, plus the statistical stopping rule used to
decide when a measurement is stable.

The stopping rule runs an experiment at least 20 times and up to 100
times, stopping as soon as the sample standard deviation is within 5% of
the mean.  If 100 runs are not enough it keeps going until the 99%
confidence half-width (normal approximation) is within 5% of the mean,
or until the hard budget runs out.  Encrypt-decrypt measurements are
much quieter, so they use the same rule with a 5-run minimum.

Throughput converts a plaintext byte count and a latency into MB/s with
MB = 10^6 bytes; the 28 bytes of frame expansion per encrypted message
are deliberately excluded.
"""

from __future__ import annotations

import csv
import enum
import math
import os
import statistics
import struct
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable

from . import collectives
from .aead import AeadProvider, create_provider
from .transport import ProcessGroup

_ELAPSED = struct.Struct("<d")

DATA_TAG = 0x00500001
REPLY_TAG = 0x00500002
STATS_TAG = 0x00500003

PINGPONG_ROUNDS_SMALL = 10_000
PINGPONG_ROUNDS_LARGE = 1_000
PINGPONG_LARGE_CUTOFF = 1 << 20  # sizes below 1 MiB use the small-count default
MULTIPAIR_WINDOW = 64
MULTIPAIR_ITERATIONS = 100
ENCDEC_ITERATIONS = 500_000
COLLECTIVE_ITERATIONS = 100


class StopReason(enum.Enum):
    STDDEV_OK = "stddev_ok"
    CI_OK = "ci_ok"
    BUDGET = "budget"


@dataclass(frozen=True)
class StopPolicy:
    """When to stop repeating a measurement."""

    min_runs: int = 20
    max_runs_phase1: int = 100
    cv_target: float = 0.05
    ci_level: float = 0.99
    hard_budget: int = 1000

    def __post_init__(self) -> None:
        if self.min_runs < 2:
            raise ValueError("min_runs must be at least 2")
        if not self.min_runs <= self.max_runs_phase1 <= self.hard_budget:
            raise ValueError("need min_runs <= max_runs_phase1 <= hard_budget")
        if not 0 < self.cv_target < 1 or not 0 < self.ci_level < 1:
            raise ValueError("cv_target and ci_level must be in (0, 1)")


ENCDEC_STOP_POLICY = StopPolicy(min_runs=5)


@dataclass(frozen=True)
class LatencySample:
    """One run's mean per-round latency for a (size, pair-count) point."""

    message_size: int
    k_pairs: int
    run_index: int
    latency_us: float

    def __post_init__(self) -> None:
        if self.message_size < 0:
            raise ValueError("message_size must be >= 0")
        if self.k_pairs < 1:
            raise ValueError("k_pairs must be >= 1")
        if self.latency_us <= 0:
            raise ValueError("latency must be positive")


@dataclass(frozen=True)
class BenchmarkResult:
    samples: list[LatencySample] = field(repr=False)
    mean: float
    stddev: float
    ci99_halfwidth: float
    stop_reason: StopReason

    @property
    def run_count(self) -> int:
        return len(self.samples)


def _z_for(level: float) -> float:
    return statistics.NormalDist().inv_cdf(0.5 + level / 2.0)


def _stop_decision(latencies: list[float], policy: StopPolicy, z: float) -> StopReason | None:
    n = len(latencies)
    if n < policy.min_runs:
        return None
    mean = statistics.fmean(latencies)
    sd = statistics.stdev(latencies)
    if n <= policy.max_runs_phase1:
        if sd <= policy.cv_target * mean:
            return StopReason.STDDEV_OK
    elif z * sd / math.sqrt(n) <= policy.cv_target * mean:
        return StopReason.CI_OK
    if n >= policy.hard_budget:
        return StopReason.BUDGET
    return None


def _build_result(
    latencies: list[float],
    reason: StopReason,
    z: float,
    message_size: int,
    k_pairs: int,
) -> BenchmarkResult:
    mean = statistics.fmean(latencies)
    sd = statistics.stdev(latencies)
    samples = [
        LatencySample(message_size, k_pairs, i, lat) for i, lat in enumerate(latencies)
    ]
    return BenchmarkResult(
        samples=samples,
        mean=mean,
        stddev=sd,
        ci99_halfwidth=z * sd / math.sqrt(len(latencies)),
        stop_reason=reason,
    )


def run_until_stable(
    measure: Callable[[], float],
    policy: StopPolicy = StopPolicy(),
    *,
    message_size: int = 0,
    k_pairs: int = 1,
) -> BenchmarkResult:
    """Repeat ``measure`` (returning µs) until the stopping rule fires."""
    z = _z_for(policy.ci_level)
    latencies: list[float] = []
    reason = None
    while reason is None:
        latencies.append(float(measure()))
        reason = _stop_decision(latencies, policy, z)
    return _build_result(latencies, reason, z, message_size, k_pairs)


_STOP_FLAGS = {
    StopReason.STDDEV_OK: b"\x01",
    StopReason.CI_OK: b"\x02",
    StopReason.BUDGET: b"\x03",
}
_FLAG_REASONS = {v: k for k, v in _STOP_FLAGS.items()}


def run_until_stable_group(
    g: ProcessGroup,
    measure: Callable[[], float],
    policy: StopPolicy = StopPolicy(),
    *,
    message_size: int = 0,
    k_pairs: int = 1,
) -> BenchmarkResult | None:
    """Group-synchronous stopping: rank 0's latencies drive the rule.

    Every rank must call this with the same arguments; after each run
    rank 0 broadcasts whether to continue, so all ranks take the same
    number of runs.  Each rank's result holds its own local samples with
    the shared stop reason; ranks that only observed (all-zero local
    latencies, e.g. idle ranks of a small pair count) get None.
    """
    z = _z_for(policy.ci_level)
    latencies: list[float] = []
    reason: StopReason | None = None
    while reason is None:
        latencies.append(float(measure()))
        if g.rank == 0:
            decision = _stop_decision(latencies, policy, z)
            flag = _STOP_FLAGS.get(decision, b"\x00")
            collectives.bcast(g, 0, flag)
        else:
            flag = collectives.bcast(g, 0)
        reason = _FLAG_REASONS.get(flag)
    if all(lat <= 0 for lat in latencies):
        return None
    return _build_result(latencies, reason, z, message_size, k_pairs)


def throughput(size_bytes: int, latency_us: float) -> float:
    """Plaintext MB/s (MB = 10^6 bytes); frame expansion is excluded."""
    if size_bytes <= 0:
        raise ValueError("throughput needs a positive message size")
    if latency_us <= 0:
        raise ValueError("throughput needs a positive latency")
    return size_bytes / latency_us


def default_pingpong_rounds(size: int, scale: float = 1.0) -> int:
    rounds = PINGPONG_ROUNDS_SMALL if size < PINGPONG_LARGE_CUTOFF else PINGPONG_ROUNDS_LARGE
    return max(1, round(rounds * scale))


def _warmup_rounds(rounds: int) -> int:
    # 10% of the timed rounds, at least 10, to shed cold-start effects
    return max(10, rounds // 10)


def _payload(size: int, seed: int | None = None) -> bytes:
    if seed is None:
        return os.urandom(size)
    out = bytearray()
    x = seed & 0xFFFFFFFFFFFFFFFF
    while len(out) < size:
        x = (x * 6364136223846793005 + 1442695040888963407) & 0xFFFFFFFFFFFFFFFF
        out += x.to_bytes(8, "little")
    return bytes(out[:size])


def pingpong(
    g: ProcessGroup,
    size: int,
    rounds: int,
    *,
    encrypted: bool = False,
    warmup: int | None = None,
    initiator: int = 0,
    payload_seed: int | None = None,
) -> float:
    """One ping-pong experiment; returns µs per one-way message.

    Both ranks must call this with identical arguments.  Rank
    ``initiator`` sends first; each round is one full round trip, so the
    reported latency is elapsed / (2 * rounds).
    """
    if g.size != 2:
        raise ValueError("ping-pong needs a group of exactly 2 ranks")
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    peer = 1 - g.rank
    body = _payload(size, payload_seed)
    if encrypted:
        send, recv = g.encrypted_send, g.encrypted_recv
    else:
        send, recv = g.send, g.recv

    warmup = _warmup_rounds(rounds) if warmup is None else warmup
    i_am_initiator = g.rank == initiator

    def one_round() -> None:
        if i_am_initiator:
            send(peer, DATA_TAG, body)
            recv(peer, DATA_TAG)
        else:
            recv(peer, DATA_TAG)
            send(peer, DATA_TAG, body)

    for _ in range(warmup):
        one_round()
    g.barrier()
    start = time.perf_counter()
    for _ in range(rounds):
        one_round()
    elapsed = time.perf_counter() - start
    return elapsed * 1e6 / (2 * rounds)


def multipair(
    g: ProcessGroup,
    k: int,
    size: int,
    iterations: int,
    *,
    window: int = MULTIPAIR_WINDOW,
    encrypted: bool = True,
    warmup: int | None = None,
    payload_seed: int | None = None,
) -> float:
    """One multi-pair experiment; returns µs per window of 64 messages.

    Ranks 0..k-1 each send ``window`` non-blocking messages per iteration
    to their partner rank (rank + k) and wait for a short reply before
    the next iteration; the partner posts ``window`` receives, waits for
    all of them, then replies.  Rank 0 returns the slowest sender's
    per-iteration time (the aggregate window latency); other ranks return
    their local view.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if g.size < 2 * k:
        raise ValueError(f"group of {g.size} cannot host {k} pairs")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    warmup = max(1, iterations // 10) if warmup is None else warmup

    sender = g.rank < k
    participating = g.rank < 2 * k
    peer = g.rank + k if sender else g.rank - k
    body = _payload(size, payload_seed)
    reply = b"ok!\n"

    if encrypted:
        isend, irecv = g.encrypted_isend, g.encrypted_irecv
    else:
        isend, irecv = g.isend, g.irecv

    def one_iteration() -> None:
        if sender:
            handles = [isend(peer, DATA_TAG, body) for _ in range(window)]
            for h in handles:
                h.wait()
            g.recv(peer, REPLY_TAG)
        else:
            handles = [irecv(peer, DATA_TAG) for _ in range(window)]
            for h in handles:
                h.wait()
            g.send(peer, REPLY_TAG, reply)

    elapsed = 0.0
    if participating:
        for _ in range(warmup):
            one_iteration()
    g.barrier()
    if participating:
        start = time.perf_counter()
        for _ in range(iterations):
            one_iteration()
        elapsed = time.perf_counter() - start
    g.barrier()

    # rank 0 aggregates the senders' elapsed times; slowest pair wins
    if g.rank == 0:
        elapsed_by_rank = [elapsed]
        for r in range(1, g.size):
            (other,) = _ELAPSED.unpack(g.recv(r, STATS_TAG))
            elapsed_by_rank.append(other)
        slowest = max(elapsed_by_rank[r] for r in range(k))
        return slowest * 1e6 / iterations
    g.send(0, STATS_TAG, _ELAPSED.pack(elapsed))
    return elapsed * 1e6 / iterations if participating else 0.0


def encdec_bench(
    size: int,
    iterations: int,
    *,
    threads: int = 1,
    backend: str = "aes-gcm",
    key: bytes | None = None,
    provider_factory: Callable[[], AeadProvider] | None = None,
    warmup: int | None = None,
    payload_seed: int | None = None,
) -> float:
    """One encrypt-then-decrypt experiment; returns µs per round.

    ``threads`` workers each seal and open a ``size``-byte buffer
    ``iterations`` times; every worker owns its own provider instance.
    A round is one seal+open on each worker, so the reported latency is
    wall time / iterations.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if threads < 1:
        raise ValueError("threads must be >= 1")
    if provider_factory is None:
        key_bytes = key if key is not None else bytes(32)
        provider_factory = lambda: create_provider(backend, key_bytes)  # noqa: E731
    warmup = _warmup_rounds(iterations) if warmup is None else warmup

    start_line = threading.Barrier(threads + 1)
    errors: list[Exception] = []

    def worker() -> None:
        try:
            provider = provider_factory()
            buf = _payload(size, payload_seed)
            for _ in range(warmup):
                provider.open(provider.seal(buf))
            start_line.wait()
            for _ in range(iterations):
                provider.open(provider.seal(buf))
        except Exception as exc:  # surfaced to the caller below
            errors.append(exc)
            try:
                start_line.abort()
            except threading.BrokenBarrierError:
                pass

    pool = [threading.Thread(target=worker, daemon=True) for _ in range(threads)]
    for t in pool:
        t.start()
    try:
        start_line.wait()
    except threading.BrokenBarrierError:
        pass
    start = time.perf_counter()
    for t in pool:
        t.join()
    elapsed = time.perf_counter() - start
    if errors:
        raise errors[0]
    return elapsed * 1e6 / iterations


_COLLECTIVE_OPS = ("alltoall", "allgather", "bcast", "alltoallv")


def collective_bench(
    g: ProcessGroup,
    op: str,
    size: int,
    iterations: int = COLLECTIVE_ITERATIONS,
    *,
    encrypted: bool = True,
    warmup: int | None = None,
    payload_seed: int | None = None,
) -> float:
    """Time one collective at one message size; returns µs per call.

    A barrier separates iterations; the barrier itself is not timed.
    """
    if op not in _COLLECTIVE_OPS:
        raise ValueError(f"op must be one of {_COLLECTIVE_OPS}")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    warmup = max(1, iterations // 10) if warmup is None else warmup
    provider = g.provider
    if encrypted and provider is None:
        raise ValueError("group has no AEAD provider configured")
    body = _payload(size, payload_seed)
    items = [body] * g.size
    lengths = [size] * g.size

    def call() -> None:
        if op == "bcast":
            if encrypted:
                collectives.encrypted_bcast(g, provider, 0, body if g.rank == 0 else None)
            else:
                collectives.bcast(g, 0, body if g.rank == 0 else None)
        elif op == "alltoall":
            if encrypted:
                collectives.encrypted_alltoall(g, provider, items)
            else:
                collectives.alltoall(g, items)
        elif op == "allgather":
            if encrypted:
                collectives.encrypted_allgather(g, provider, body)
            else:
                collectives.allgather(g, body)
        else:
            if encrypted:
                collectives.encrypted_alltoallv(g, provider, items, lengths)
            else:
                collectives.alltoallv(g, items, lengths)

    for _ in range(warmup):
        g.barrier()
        call()
    total = 0.0
    for _ in range(iterations):
        g.barrier()
        start = time.perf_counter()
        call()
        total += time.perf_counter() - start
    return total * 1e6 / iterations


CSV_FIELDS = ("size_bytes", "k_pairs", "run_index", "latency_us")


def write_samples_csv(path: str, samples: Iterable[LatencySample]) -> None:
    """Write samples sorted by size, then pair count, then run index."""
    ordered = sorted(samples, key=lambda s: (s.message_size, s.k_pairs, s.run_index))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_FIELDS)
        for s in ordered:
            writer.writerow([s.message_size, s.k_pairs, s.run_index, repr(s.latency_us)])


def read_samples_csv(path: str) -> list[LatencySample]:
    samples: list[LatencySample] = []
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != CSV_FIELDS:
            raise ValueError(f"{path}: expected header {','.join(CSV_FIELDS)}")
        for row in reader:
            samples.append(
                LatencySample(
                    message_size=int(row["size_bytes"]),
                    k_pairs=int(row["k_pairs"]),
                    run_index=int(row["run_index"]),
                    latency_us=float(row["latency_us"]),
                )
            )
    return samples
