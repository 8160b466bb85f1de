"""Synchronous federated averaging over private gradient releases.

One coordinator, n workers. Per round every worker sends one release,
the coordinator averages them unweighted and broadcasts the average,
and every worker applies it with the shared learning rate. Workers and
coordinator advance in lockstep; a budget refusal or protocol fault on
any side aborts the whole session.

The same :class:`WorkerReplica` state machine drives both transports:
``inproc_session`` runs everything deterministically in one thread, the
``Coordinator`` / ``worker_run`` pair speaks the wire protocol over TCP.
Averages are summed in ascending worker id order and released vectors
travel as exact float64 bytes, so the two transports produce
bit-identical models for the same seeds.
"""

from __future__ import annotations

import math
import socket
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import Dataset
from .dpsgd import BatchSampler, DpSgdConfig, GradientRelease, train_step
from .errors import (
    BudgetExceeded,
    DecodeError,
    InvalidValue,
    ProtocolError,
    TimedOut,
    TransportError,
)
from .network import Network, NetworkDims, apply_update, init_network
from .privacy import AccountLedger, PrivacyParams
from .rng import RandomSource
from .wire import (
    ABORT_BUDGET,
    ABORT_DECODE,
    ABORT_PROTOCOL,
    ABORT_TIMEOUT,
    HEADER_LEN,
    MAGIC,
    PROTOCOL_VERSION,
    Abort,
    Avg,
    Done,
    Grad,
    Hello,
    Init,
    Message,
    abort_name,
    decode,
    encode,
)


@dataclass
class SessionConfig:
    """Shared session parameters; the coordinator hands them out via INIT."""

    n_workers: int
    total_steps: int
    learning_rate: float
    dims: NetworkDims
    init_seed: int | None = None
    init_parameters: np.ndarray | None = None
    host: str = "127.0.0.1"
    port: int = 0
    timeout: float = 60.0

    def __post_init__(self):
        if self.n_workers < 1:
            raise InvalidValue("session needs at least one worker")
        if self.total_steps < 0:
            raise InvalidValue("total_steps must be >= 0")
        if not (math.isfinite(self.learning_rate) and self.learning_rate > 0.0):
            raise InvalidValue("learning rate must be finite and positive")
        if (self.init_seed is None) == (self.init_parameters is None):
            raise InvalidValue("need exactly one of init_seed or init_parameters")
        if self.timeout <= 0.0:
            raise InvalidValue("timeout must be positive")

    def init_message(self) -> Init:
        return Init(
            dims=self.dims,
            total_steps=self.total_steps,
            learning_rate=self.learning_rate,
            seed=self.init_seed,
            parameters=self.init_parameters,
        )


@dataclass
class WorkerSpec:
    """Everything one worker needs besides the session config."""

    worker_id: int
    dp_config: DpSgdConfig
    dataset: Dataset
    budget: PrivacyParams
    seed: int

    def __post_init__(self):
        if not 0 <= self.worker_id < 2**32:
            raise InvalidValue("worker id must fit in u32")


class WorkerReplica:
    """One worker's training state, transport-agnostic.

    Batch order and noise come from streams derived from the worker seed
    by fixed keys, so a replica's behaviour depends only on (spec, INIT),
    never on transport timing.
    """

    def __init__(self, spec: WorkerSpec):
        self.worker_id = spec.worker_id
        self.dp_config = spec.dp_config
        self.ledger = AccountLedger(spec.budget)
        root = RandomSource(spec.seed)
        self._sampler = BatchSampler(
            spec.dataset.sequences, spec.dp_config.batch_size, root.derive("batches")
        )
        self._noise_rng = root.derive("noise")
        self.net: Network | None = None
        self.learning_rate: float | None = None
        self.total_steps: int | None = None

    def handle_init(self, init: Init) -> None:
        if init.seed is not None:
            self.net = init_network(init.dims, RandomSource(init.seed))
        else:
            self.net = Network.from_flat(init.dims, init.parameters)
        self.learning_rate = init.learning_rate
        self.total_steps = init.total_steps

    def make_release(self, step_id: int) -> GradientRelease:
        """One private release; BudgetExceeded propagates with state intact."""
        if self.net is None:
            raise ProtocolError("release requested before INIT")
        batch = self._sampler.next_batch()
        release, self.ledger = train_step(
            self.net, batch, self.dp_config, self.ledger, self._noise_rng, step_id
        )
        return release

    def apply_average(self, avg: Avg) -> None:
        if self.net is None:
            raise ProtocolError("average received before INIT")
        self.net = apply_update(self.net, avg.vector, self.learning_rate)


def average_releases(releases: Sequence[GradientRelease]) -> np.ndarray:
    """Unweighted mean of release vectors, summed in the order given.

    Callers pass releases in ascending worker id order; the fixed
    summation order is what makes the average bit-reproducible.
    """
    if not releases:
        raise InvalidValue("cannot average zero releases")
    first = releases[0]
    acc = np.zeros(len(first.vector))
    for r in releases:
        if r.step_id != first.step_id:
            raise ProtocolError(f"mixed step ids {first.step_id} and {r.step_id} in one round")
        if len(r.vector) != len(first.vector):
            raise ProtocolError("release vectors differ in length")
        acc += r.vector
    return acc / len(releases)


@dataclass(frozen=True)
class TranscriptEntry:
    """One protocol message as seen from the coordinator."""

    direction: str  # "recv" or "send"
    worker_id: int
    kind: str
    step_id: int | None
    payload_bytes: int

    def line(self) -> str:
        step = "-" if self.step_id is None else str(self.step_id)
        return f"{self.direction}\t{self.worker_id}\t{self.kind}\t{step}\t{self.payload_bytes}"


def _entry(direction: str, worker_id: int, msg: Message) -> TranscriptEntry:
    kind = type(msg).__name__.upper()
    step: int | None = None
    if isinstance(msg, Grad):
        step = msg.step_id
    elif isinstance(msg, Avg):
        step = msg.step_id
    elif isinstance(msg, Done):
        step = msg.steps_completed
    return TranscriptEntry(direction, worker_id, kind, step, len(encode(msg)) - HEADER_LEN)


def write_transcript(entries: Sequence[TranscriptEntry], path) -> None:
    from pathlib import Path

    Path(path).write_text("".join(e.line() + "\n" for e in entries))


@dataclass
class SessionSummary:
    steps_completed: int
    aborted: int | None  # abort code, None for a clean finish
    per_worker_spent: dict[int, PrivacyParams]

    @property
    def clean(self) -> bool:
        return self.aborted is None


@dataclass
class SessionResult:
    """In-process session outcome: everything lives in one address space."""

    networks: dict[int, Network]
    ledgers: dict[int, AccountLedger]
    transcript: list[TranscriptEntry]
    summary: SessionSummary


def _spent_totals(per_worker: dict[int, list[PrivacyParams]]) -> dict[int, PrivacyParams]:
    return {
        wid: PrivacyParams(
            math.fsum(p.epsilon for p in entries), math.fsum(p.delta for p in entries)
        )
        for wid, entries in per_worker.items()
    }


def inproc_session(
    cfg: SessionConfig,
    specs: Sequence[WorkerSpec],
    on_round: Callable[[int, dict[int, Network]], None] | None = None,
) -> SessionResult:
    """Deterministic single-thread simulation of a full session.

    Runs the identical replica and averaging code the TCP path uses and
    records the same coordinator-side transcript. ``on_round`` sees the
    per-worker networks after every applied average.
    """
    if len(specs) != cfg.n_workers:
        raise InvalidValue(f"config says {cfg.n_workers} workers, got {len(specs)} specs")
    ids = [s.worker_id for s in specs]
    if len(set(ids)) != len(ids):
        raise InvalidValue("worker ids must be unique")

    by_id = {s.worker_id: WorkerReplica(s) for s in specs}
    wids = sorted(by_id)
    transcript: list[TranscriptEntry] = []
    spent: dict[int, list[PrivacyParams]] = {wid: [] for wid in wids}

    for wid in wids:
        transcript.append(_entry("recv", wid, Hello(wid)))
    init = cfg.init_message()
    for wid in wids:
        transcript.append(_entry("send", wid, init))
        by_id[wid].handle_init(init)

    aborted: int | None = None
    steps_completed = 0
    for step in range(cfg.total_steps):
        releases: list[GradientRelease] = []
        for wid in wids:
            try:
                release = by_id[wid].make_release(step)
            except BudgetExceeded as exc:
                abort = Abort(ABORT_BUDGET, str(exc))
                transcript.append(_entry("recv", wid, abort))
                aborted = ABORT_BUDGET
                break
            transcript.append(_entry("recv", wid, Grad(release)))
            releases.append(release)
        if aborted is not None:
            abort = Abort(ABORT_BUDGET, "relayed budget abort")
            for wid in wids:
                transcript.append(_entry("send", wid, abort))
            break
        avg = Avg(step, average_releases(releases))
        for wid, release in zip(wids, releases):
            transcript.append(_entry("send", wid, avg))
            by_id[wid].apply_average(avg)
            spent[wid].append(release.spent)
        steps_completed += 1
        if on_round is not None:
            on_round(step, {wid: by_id[wid].net for wid in wids})

    if aborted is None:
        done = Done(steps_completed)
        for wid in wids:
            transcript.append(_entry("send", wid, done))

    summary = SessionSummary(
        steps_completed=steps_completed,
        aborted=aborted,
        per_worker_spent=_spent_totals(spent),
    )
    return SessionResult(
        networks={wid: by_id[wid].net for wid in wids},
        ledgers={wid: by_id[wid].ledger for wid in wids},
        transcript=transcript,
        summary=summary,
    )


class MessageStream:
    """Length-prefixed message framing over a connected socket."""

    def __init__(self, sock: socket.socket):
        self._sock = sock

    def send(self, msg: Message) -> None:
        try:
            self._sock.sendall(encode(msg))
        except OSError as exc:
            raise TransportError(f"send failed: {exc}") from exc

    def _read_exact(self, n: int) -> bytes:
        chunks = []
        remaining = n
        while remaining:
            try:
                chunk = self._sock.recv(remaining)
            except socket.timeout as exc:
                raise TimedOut("peer did not respond within the timeout") from exc
            except OSError as exc:
                raise TransportError(f"recv failed: {exc}") from exc
            if not chunk:
                raise TransportError("connection closed mid-stream")
            chunks.append(chunk)
            remaining -= len(chunk)
        return b"".join(chunks)

    def recv(self) -> Message:
        header = self._read_exact(HEADER_LEN)
        if header[:4] != MAGIC:
            raise DecodeError(f"bad magic {header[:4]!r}")
        payload_len = int.from_bytes(header[5:9], "little")
        payload = self._read_exact(payload_len) if payload_len else b""
        return decode(header + payload)

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass


class Coordinator:
    """TCP coordinator. ``bind`` first (port 0 picks a free port), then ``run``."""

    def __init__(self, cfg: SessionConfig):
        self.cfg = cfg
        self.transcript: list[TranscriptEntry] = []
        self._listener: socket.socket | None = None
        self.address: tuple[str, int] | None = None

    def bind(self) -> tuple[str, int]:
        try:
            listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            listener.bind((self.cfg.host, self.cfg.port))
            listener.listen(self.cfg.n_workers)
            listener.settimeout(self.cfg.timeout)
        except OSError as exc:
            raise TransportError(f"cannot listen on {self.cfg.host}:{self.cfg.port}: {exc}") from exc
        self._listener = listener
        self.address = listener.getsockname()[:2]
        return self.address

    def _broadcast(self, streams: dict[int, MessageStream], msg: Message) -> None:
        for wid in sorted(streams):
            try:
                streams[wid].send(msg)
                self.transcript.append(_entry("send", wid, msg))
            except TransportError:
                pass  # peers may already be gone during an abort

    def run(self) -> SessionSummary:
        if self._listener is None:
            self.bind()
        cfg = self.cfg
        streams: dict[int, MessageStream] = {}
        spent: dict[int, list[PrivacyParams]] = {}
        try:
            for _ in range(cfg.n_workers):
                try:
                    conn, _ = self._listener.accept()
                except socket.timeout as exc:
                    raise TimedOut(
                        f"only {len(streams)} of {cfg.n_workers} workers connected"
                    ) from exc
                conn.settimeout(cfg.timeout)
                stream = MessageStream(conn)
                hello = stream.recv()
                if not isinstance(hello, Hello):
                    raise ProtocolError(f"expected HELLO, got {type(hello).__name__}")
                if hello.protocol_version != PROTOCOL_VERSION:
                    raise ProtocolError(f"unsupported protocol version {hello.protocol_version}")
                if hello.worker_id in streams:
                    raise ProtocolError(f"duplicate worker id {hello.worker_id}")
                streams[hello.worker_id] = stream
                spent[hello.worker_id] = []
                self.transcript.append(_entry("recv", hello.worker_id, hello))

            init = cfg.init_message()
            for wid in sorted(streams):
                streams[wid].send(init)
                self.transcript.append(_entry("send", wid, init))

            aborted: int | None = None
            steps_completed = 0
            for step in range(cfg.total_steps):
                releases: list[GradientRelease] = []
                for wid in sorted(streams):
                    try:
                        msg = streams[wid].recv()
                    except TimedOut:
                        self._broadcast(streams, Abort(ABORT_TIMEOUT, f"worker {wid} timed out"))
                        aborted = ABORT_TIMEOUT
                        break
                    except (DecodeError, TransportError) as exc:
                        self._broadcast(streams, Abort(ABORT_DECODE, f"worker {wid}: {exc}"))
                        aborted = ABORT_DECODE
                        break
                    if isinstance(msg, Abort):
                        self.transcript.append(_entry("recv", wid, msg))
                        self._broadcast(streams, Abort(msg.code, f"relayed from worker {wid}"))
                        aborted = msg.code
                        break
                    if not isinstance(msg, Grad) or msg.step_id != step:
                        self._broadcast(
                            streams,
                            Abort(ABORT_PROTOCOL, f"worker {wid} sent {type(msg).__name__} at step {step}"),
                        )
                        aborted = ABORT_PROTOCOL
                        break
                    self.transcript.append(_entry("recv", wid, msg))
                    releases.append(msg.release)
                if aborted is not None:
                    break
                avg = Avg(step, average_releases(releases))
                self._broadcast(streams, avg)
                for wid, release in zip(sorted(streams), releases):
                    spent[wid].append(release.spent)
                steps_completed += 1

            if aborted is None:
                self._broadcast(streams, Done(steps_completed))
            return SessionSummary(
                steps_completed=steps_completed,
                aborted=aborted,
                per_worker_spent=_spent_totals(spent),
            )
        finally:
            for stream in streams.values():
                stream.close()
            self._listener.close()


@dataclass
class WorkerResult:
    worker_id: int
    network: Network
    ledger: AccountLedger
    steps_completed: int
    aborted: int | None

    @property
    def clean(self) -> bool:
        return self.aborted is None


def _connect(host: str, port: int, timeout: float) -> socket.socket:
    deadline = time.monotonic() + timeout
    while True:
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
            sock.settimeout(timeout)
            return sock
        except ConnectionRefusedError:
            if time.monotonic() >= deadline:
                raise TransportError(f"coordinator at {host}:{port} never came up")
            time.sleep(0.05)
        except OSError as exc:
            raise TransportError(f"cannot connect to {host}:{port}: {exc}") from exc


def worker_run(
    address: tuple[str, int], spec: WorkerSpec, timeout: float = 60.0
) -> WorkerResult:
    """Run one worker over TCP against a coordinator at the given address.

    Everything the worker does not own (dims, step count, learning rate,
    initial parameters) arrives in INIT. Returns the final network and
    ledger even when the session aborts; the ledger then reflects exactly
    the releases that were emitted.
    """
    host, port = address
    replica = WorkerReplica(spec)
    stream = MessageStream(_connect(host, port, timeout))
    try:
        stream.send(Hello(spec.worker_id))
        first = stream.recv()
        if isinstance(first, Abort):
            raise ProtocolError(f"session aborted before INIT: {abort_name(first.code)}")
        if not isinstance(first, Init):
            raise ProtocolError(f"expected INIT, got {type(first).__name__}")
        replica.handle_init(first)

        def result(steps: int, aborted: int | None) -> WorkerResult:
            return WorkerResult(
                worker_id=spec.worker_id,
                network=replica.net,
                ledger=replica.ledger,
                steps_completed=steps,
                aborted=aborted,
            )

        for step in range(first.total_steps):
            try:
                release = replica.make_release(step)
            except BudgetExceeded as exc:
                stream.send(Abort(ABORT_BUDGET, str(exc)))
                return result(step, ABORT_BUDGET)
            stream.send(Grad(release))
            try:
                msg = stream.recv()
            except TimedOut:
                return result(step, ABORT_TIMEOUT)
            except (DecodeError, TransportError):
                return result(step, ABORT_DECODE)
            if isinstance(msg, Abort):
                return result(step, msg.code)
            if not isinstance(msg, Avg) or msg.step_id != step:
                stream.send(Abort(ABORT_PROTOCOL, f"expected AVG {step}"))
                return result(step, ABORT_PROTOCOL)
            replica.apply_average(msg)

        try:
            closing = stream.recv()
        except (TimedOut, DecodeError, TransportError):
            return result(first.total_steps, ABORT_DECODE)
        if isinstance(closing, Done):
            return result(closing.steps_completed, None)
        if isinstance(closing, Abort):
            return result(first.total_steps, closing.code)
        return result(first.total_steps, ABORT_PROTOCOL)
    finally:
        stream.close()
