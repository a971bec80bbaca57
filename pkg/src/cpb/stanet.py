"""Networked STA round: coordinator service, organization client, wire format.

Frames are a 4-byte big-endian length followed by a canonical CBOR map::

    {"v": PROTOCOL_VERSION, "type": <message type>, "round": <int>, ...body}

Handles and ciphertexts travel as concatenated fixed-width byte strings
(16-byte handles, 33-byte ciphertexts), so an upload's size depends only on
the organization's own multiset.
"""

from __future__ import annotations

import asyncio
import hashlib
import logging
import socket
import struct
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import cbor2

from .collab.clustering import ClusterAssignment, ClusteringSpec
from .collab.similarity import SimilarityMatrix
from .errors import ProtocolError
from .forecast import SharedPool
from .ingest import OrgDataset
from .privacy import (
    BLOCK,
    CIPHERTEXT_BYTES,
    PairBuffer,
    Upload,
    decrypt_shared,
    encrypt_dataset,
    sta_round,
)

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
MAX_FRAME = 1 << 30
MESSAGE_TYPES = ("HELLO", "KEY_OFFER", "UPLOAD", "ROUND_STATUS", "CLUSTERS", "BUFFERS", "ERROR")
HEADER = struct.Struct(">I")


def encode_message(mtype: str, round_id: int, **body) -> bytes:
    if mtype not in MESSAGE_TYPES:
        raise ProtocolError(f"unknown message type {mtype}")
    payload = cbor2.dumps({"v": PROTOCOL_VERSION, "type": mtype, "round": round_id, **body}, canonical=True)
    if len(payload) > MAX_FRAME:
        raise ProtocolError("frame too large")
    return HEADER.pack(len(payload)) + payload


def decode_body(payload: bytes) -> dict:
    try:
        msg = cbor2.loads(payload)
    except Exception as exc:  # cbor2 raises several decoder error types
        raise ProtocolError(f"undecodable frame: {exc}") from exc
    if not isinstance(msg, dict) or msg.get("type") not in MESSAGE_TYPES:
        raise ProtocolError("malformed message")
    if msg.get("v") != PROTOCOL_VERSION:
        raise ProtocolError(f"protocol version mismatch: {msg.get('v')} != {PROTOCOL_VERSION}")
    return msg


def _split(blob: bytes, width: int) -> list[bytes]:
    if len(blob) % width:
        raise ProtocolError(f"blob length {len(blob)} not a multiple of {width}")
    return [blob[i : i + width] for i in range(0, len(blob), width)]


def upload_message(upload: Upload, round_id: int) -> bytes:
    return encode_message("UPLOAD", round_id, org=upload.org, S=b"".join(upload.S), E=b"".join(upload.E))


def upload_from_message(msg: dict) -> Upload:
    return Upload(msg["org"], _split(msg["S"], BLOCK), _split(msg["E"], CIPHERTEXT_BYTES))


def buffers_body(buffers: Sequence[PairBuffer]) -> list[dict]:
    return [
        {
            "source": b.source,
            "handles": b"".join(h for h, _ in b.entries),
            "ciphertexts": b"".join(c for _, c in b.entries),
        }
        for b in buffers
    ]


def buffers_from_body(org: str, body: list[dict]) -> list[PairBuffer]:
    out = []
    for item in body:
        hs = _split(item["handles"], BLOCK)
        cs = _split(item["ciphertexts"], CIPHERTEXT_BYTES)
        if len(hs) != len(cs):
            raise ProtocolError("buffer handles and ciphertexts misaligned")
        out.append(PairBuffer(org, item["source"], list(zip(hs, cs))))
    return out


# ---------------------------------------------------------------- coordinator


@dataclass
class StaConfig:
    host: str = "127.0.0.1"
    port: int = 0
    expected: Sequence[str] | int = 2
    spec: ClusteringSpec = field(default_factory=ClusteringSpec)
    timeout: float = 30.0
    round_id: int = 0
    linger: float = 5.0
    transcript_path: str | Path | None = None


@dataclass
class RoundState:
    phase: str = "collecting"  # collecting -> computing -> delivered | aborted
    uploads: dict[str, Upload] = field(default_factory=dict)
    digests: dict[str, bytes] = field(default_factory=dict)
    registered: set[str] = field(default_factory=set)

    _ORDER = {"collecting": 0, "computing": 1, "delivered": 2, "aborted": 2}

    def advance(self, phase: str) -> None:
        if self._ORDER[phase] <= self._ORDER[self.phase]:
            raise ProtocolError(f"illegal phase change {self.phase} -> {phase}")
        self.phase = phase


@dataclass
class StaResult:
    phase: str
    o2o: SimilarityMatrix | None
    assignment: ClusterAssignment | None
    transcript: list[bytes]


class StaServer:
    """Single-round STA coordinator.

    All round-state transitions happen on the event loop thread, so they are
    serialized without locks; only the matching/clustering step runs in an
    executor.
    """

    def __init__(self, config: StaConfig):
        self.config = config
        self.state = RoundState()
        self.transcript: list[bytes] = []
        self.outcome = None
        self._conns: dict[str, asyncio.StreamWriter] = {}
        self._messages: dict[str, list[bytes]] = {}
        self._done: asyncio.Event | None = None
        self._server: asyncio.base_events.Server | None = None
        self._thread: threading.Thread | None = None
        self._ready = threading.Event()
        self._result: StaResult | None = None
        self._error: BaseException | None = None
        self.port: int | None = None

    # -- helpers
    def _expected_ok(self, org: str) -> bool:
        exp = self.config.expected
        if isinstance(exp, int):
            return org in self.state.registered or len(self.state.registered) < exp
        return org in exp

    def _n_expected(self) -> int:
        exp = self.config.expected
        return exp if isinstance(exp, int) else len(exp)

    def _record(self, frame: bytes) -> None:
        self.transcript.append(frame)
        if self.config.transcript_path:
            with open(self.config.transcript_path, "a") as fh:
                fh.write(frame.hex() + "\n")

    async def _send(self, writer: asyncio.StreamWriter, frame: bytes) -> None:
        try:
            writer.write(frame)
            await writer.drain()
        except (ConnectionError, RuntimeError):
            pass

    def _status(self, **extra) -> bytes:
        return encode_message("ROUND_STATUS", self.config.round_id, phase=self.state.phase, **extra)

    def _error_frame(self, code: str, message: str) -> bytes:
        return encode_message("ERROR", self.config.round_id, code=code, message=message)

    # -- round logic
    async def _deliver(self, org: str) -> None:
        w = self._conns.get(org)
        if w is None:
            return
        for frame in self._messages.get(org, ()):
            await self._send(w, frame)

    async def _compute(self) -> None:
        self.state.advance("computing")
        uploads = list(self.state.uploads.values())
        loop = asyncio.get_running_loop()
        outcome = await loop.run_in_executor(None, sta_round, uploads, self.config.spec)
        self.outcome = outcome
        rid = self.config.round_id
        for org in outcome.o2o.orgs:
            a = outcome.assignment
            self._messages[org] = [
                encode_message(
                    "CLUSTERS",
                    rid,
                    org=org,
                    cluster=a.cluster_of(org),
                    peers=sorted(a.peers(org)),
                    outlier=org in a.outliers,
                ),
                encode_message("BUFFERS", rid, org=org, buffers=buffers_body(outcome.deliveries[org])),
            ]
        self.state.advance("delivered")
        for org in list(self._conns):
            await self._deliver(org)
        self._linger_task = asyncio.ensure_future(self._linger())

    async def _compute_or_abort(self) -> None:
        try:
            await self._compute()
        except Exception as exc:
            log.error("round %d failed during compute: %s", self.config.round_id, exc)
            self.state.phase = "aborted"
            frame = self._status(detail=f"compute failed: {exc}")
            for w in list(self._conns.values()):
                await self._send(w, frame)
            self._done.set()

    async def _linger(self) -> None:
        deadline = time.monotonic() + self.config.linger
        while self._conns and time.monotonic() < deadline:
            await asyncio.sleep(0.02)
        self._done.set()

    async def _watchdog(self) -> None:
        await asyncio.sleep(self.config.timeout)
        if self.state.phase == "collecting":
            missing = self._n_expected() - len(self.state.uploads)
            log.warning("round %d aborted: %d uploads missing", self.config.round_id, missing)
            self.state.advance("aborted")
            frame = self._status(detail=f"timeout with {missing} uploads missing")
            for w in list(self._conns.values()):
                await self._send(w, frame)
            self._done.set()

    async def _handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        org = None
        rid = self.config.round_id
        try:
            while True:
                head = await reader.readexactly(HEADER.size)
                (length,) = HEADER.unpack(head)
                if length > MAX_FRAME:
                    raise ProtocolError("frame too large")
                payload = await reader.readexactly(length)
                self._record(head + payload)
                try:
                    msg = decode_body(payload)
                except ProtocolError as exc:
                    await self._send(writer, self._error_frame("protocol", str(exc)))
                    break
                if msg["round"] != rid:
                    await self._send(writer, self._error_frame("round", f"expected round {rid}"))
                    break
                mtype = msg["type"]
                if mtype == "HELLO":
                    claimed = msg.get("org")
                    if not isinstance(claimed, str) or not self._expected_ok(claimed):
                        await self._send(writer, self._error_frame("unknown-org", f"{claimed!r} not expected"))
                        break
                    live = self._conns.get(claimed)
                    if live is not None and live is not writer and not live.is_closing():
                        await self._send(writer, self._error_frame("duplicate-org", f"{claimed} already connected"))
                        break
                    org = claimed
                    self._conns[org] = writer
                    self.state.registered.add(org)
                    await self._send(writer, self._status(uploaded=org in self.state.uploads))
                    if self.state.phase == "delivered":
                        await self._deliver(org)
                elif mtype == "UPLOAD":
                    if org is None or msg.get("org") != org:
                        await self._send(writer, self._error_frame("protocol", "UPLOAD before HELLO"))
                        break
                    digest = hashlib.sha256(msg["S"] + msg["E"]).digest()
                    if org in self.state.uploads:
                        if self.state.digests[org] != digest:
                            await self._send(writer, self._error_frame("duplicate-upload", f"{org} already uploaded"))
                            continue
                        # a retry of the upload we already hold: acknowledge again
                        await self._send(writer, self._status(uploaded=True))
                        continue
                    if self.state.phase != "collecting":
                        await self._send(writer, self._status(uploaded=False))
                        continue
                    self.state.uploads[org] = upload_from_message(msg)
                    self.state.digests[org] = digest
                    await self._send(writer, self._status(uploaded=True))
                    if len(self.state.uploads) == self._n_expected():
                        await self._compute_or_abort()
                elif mtype == "KEY_OFFER":
                    # key material must never reach the STA; refuse without storing it
                    await self._send(writer, self._error_frame("protocol", "KEY_OFFER is org-to-org only"))
                    break
                else:
                    await self._send(writer, self._error_frame("protocol", f"unexpected {mtype}"))
                    break
        except (asyncio.IncompleteReadError, ConnectionError):
            pass
        except ProtocolError as exc:
            await self._send(writer, self._error_frame("protocol", str(exc)))
        finally:
            if org is not None and self._conns.get(org) is writer:
                del self._conns[org]
            writer.close()

    async def serve(self) -> StaResult:
        self._done = asyncio.Event()
        self._server = await asyncio.start_server(self._handle, self.config.host, self.config.port)
        self.port = self._server.sockets[0].getsockname()[1]
        self._ready.set()
        watchdog = asyncio.ensure_future(self._watchdog())
        try:
            await self._done.wait()
        finally:
            watchdog.cancel()
            self._server.close()
            for w in list(self._conns.values()):
                w.close()
            await self._server.wait_closed()
        o = self.outcome
        return StaResult(
            self.state.phase,
            o.o2o if o else None,
            o.assignment if o else None,
            list(self.transcript),
        )

    # -- thread helpers for embedding in tests and the harness
    def start(self) -> "StaServer":
        def _run():
            try:
                self._result = asyncio.run(self.serve())
            except BaseException as exc:  # surfaced through result()
                self._error = exc
                self._ready.set()

        self._thread = threading.Thread(target=_run, name="sta", daemon=True)
        self._thread.start()
        self._ready.wait()
        if self._error:
            raise self._error
        return self

    def result(self, timeout: float | None = None) -> StaResult:
        self._thread.join(timeout)
        if self._thread.is_alive():
            raise TimeoutError("STA round still running")
        if self._error:
            raise self._error
        return self._result


def serve_sta(config: StaConfig) -> StaResult:
    """Run one round in the foreground until delivered or aborted."""
    return asyncio.run(StaServer(config).serve())


# ---------------------------------------------------------------- organization


@dataclass
class OrgConfig:
    sta: tuple[str, int]
    org: str
    dataset: OrgDataset
    key: bytes
    round_id: int = 0
    mode: str = "presence"
    retries: int = 5
    timeout: float = 60.0
    # test hook: close the connection right after sending UPLOAD this many times
    drop_before_ack: int = 0


@dataclass
class OrgOutcome:
    org: str
    phase: str
    cluster: int | None = None
    peers: tuple[str, ...] = ()
    outlier: bool = False
    pool: SharedPool | None = None
    sent_bytes: int = 0
    uploads_sent: int = 0


class _Conn:
    def __init__(self, addr: tuple[str, int], timeout: float):
        self.sock = socket.create_connection(addr, timeout=timeout)
        self.sent = 0

    def send(self, frame: bytes) -> None:
        self.sock.sendall(frame)
        self.sent += len(frame)

    def _exact(self, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            chunk = self.sock.recv(n - len(buf))
            if not chunk:
                raise ConnectionError("STA closed the connection")
            buf.extend(chunk)
        return bytes(buf)

    def recv(self) -> dict:
        (length,) = HEADER.unpack(self._exact(HEADER.size))
        if length > MAX_FRAME:
            raise ProtocolError("frame too large")
        return decode_body(self._exact(length))

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


def run_org(config: OrgConfig) -> OrgOutcome:
    """Encrypt, upload (retrying until acknowledged), then collect and decrypt buffers."""
    enc = encrypt_dataset(config.dataset, config.key, config.mode)
    upload = enc.upload()
    up_frame = upload_message(upload, config.round_id)
    hello = encode_message("HELLO", config.round_id, org=config.org)
    outcome = OrgOutcome(config.org, "collecting")
    drops = config.drop_before_ack
    attempts = 0
    acked = False
    clusters = buffers = None

    while True:
        attempts += 1
        try:
            conn = _Conn(config.sta, config.timeout)
        except OSError as exc:
            if attempts > config.retries:
                raise ProtocolError(f"cannot reach STA: {exc}") from exc
            time.sleep(0.05 * attempts)
            continue
        try:
            conn.send(hello)
            status = conn.recv()
            _check(status, config.org)
            if status.get("phase") == "aborted":
                outcome.phase = "aborted"
                return outcome
            acked = acked or bool(status.get("uploaded"))
            if not acked:
                conn.send(up_frame)
                outcome.uploads_sent += 1
                if drops > 0:
                    drops -= 1
                    raise ConnectionError("injected disconnect before acknowledgment")
            while clusters is None or buffers is None:
                msg = conn.recv()
                _check(msg, config.org)
                if msg["type"] == "ROUND_STATUS":
                    if msg["phase"] == "aborted":
                        outcome.phase = "aborted"
                        return outcome
                    acked = acked or bool(msg.get("uploaded"))
                elif msg["type"] == "CLUSTERS":
                    clusters = msg
                elif msg["type"] == "BUFFERS":
                    buffers = msg
            break
        except (ConnectionError, socket.timeout, OSError) as exc:
            if attempts > config.retries:
                raise ProtocolError(f"{config.org}: giving up after {attempts} attempts: {exc}") from exc
            log.info("%s: reconnecting after %s", config.org, exc)
        finally:
            outcome.sent_bytes += conn.sent
            conn.close()

    outcome.phase = "delivered"
    outcome.cluster = clusters["cluster"]
    outcome.peers = tuple(clusters["peers"])
    outcome.outlier = bool(clusters["outlier"])
    pair_buffers = buffers_from_body(config.org, buffers["buffers"])
    outcome.pool = decrypt_shared(config.org, pair_buffers, enc.K)
    return outcome


def _check(msg: dict, org: str) -> None:
    if msg["type"] == "ERROR":
        raise ProtocolError(f"{org}: STA error {msg.get('code')}: {msg.get('message')}")


# ---------------------------------------------------------------- key exchange


def offer_key(addr: tuple[str, int], key: bytes, round_id: int = 0, timeout: float = 10.0) -> None:
    """Send the shared key directly to another organization (never via the STA)."""
    conn = _Conn(addr, timeout)
    try:
        conn.send(encode_message("KEY_OFFER", round_id, key=key))
    finally:
        conn.close()


def accept_key(host: str = "127.0.0.1", port: int = 0, timeout: float = 30.0, on_listen=None) -> bytes:
    """Wait for one KEY_OFFER; ``on_listen(port)`` fires once the socket is bound."""
    with socket.create_server((host, port)) as srv:
        srv.settimeout(timeout)
        if on_listen:
            on_listen(srv.getsockname()[1])
        sock, _ = srv.accept()
        with sock:
            sock.settimeout(timeout)
            conn = _Conn.__new__(_Conn)
            conn.sock, conn.sent = sock, 0
            msg = conn.recv()
    if msg["type"] != "KEY_OFFER":
        raise ProtocolError(f"expected KEY_OFFER, got {msg['type']}")
    return bytes(msg["key"])


def run_networked_round(
    datasets: dict[str, OrgDataset],
    spec: ClusteringSpec,
    key: bytes,
    mode: str = "presence",
    round_id: int = 0,
    timeout: float = 60.0,
) -> tuple[StaResult, dict[str, OrgOutcome]]:
    """Loopback round: one STA thread plus one client thread per organization."""
    server = StaServer(StaConfig(expected=sorted(datasets), spec=spec, timeout=timeout, round_id=round_id, linger=timeout)).start()
    outcomes: dict[str, OrgOutcome] = {}
    errors: list[BaseException] = []

    def _client(org):
        try:
            outcomes[org] = run_org(
                OrgConfig(("127.0.0.1", server.port), org, datasets[org], key, round_id, mode, timeout=timeout)
            )
        except BaseException as exc:
            errors.append(exc)

    threads = [threading.Thread(target=_client, args=(o,)) for o in datasets]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    result = server.result(timeout)
    if errors:
        raise errors[0]
    return result, outcomes
