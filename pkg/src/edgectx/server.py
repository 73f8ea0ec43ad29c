"""Parameter server: publishes trained model bundles and collects uploads.

The store keeps one immutable bundle per model kind; publishing swaps the
reference under a lock, so readers always see a complete old or new bundle,
never a mix. Versions increase by exactly one per publish and survive
restarts when a persist directory is configured.
"""

from __future__ import annotations

import json
import logging
import re
import socketserver
import threading
import time
from dataclasses import replace
from pathlib import Path

from . import protocol
from .bundle import (
    MODEL_KINDS,
    BundleError,
    ParameterBundle,
    decode_bundle,
    encode_bundle,
)
from .data import SensorReading
from .learners import ThresholdVector
from .nn import NetworkParameters
from .protocol import (
    MSG_ACK,
    MSG_GET_PARAMS,
    MSG_NOT_READY,
    MSG_PARAMS,
    MSG_PING,
    MSG_PONG,
    MSG_PUSH_DATA,
    ProtocolError,
    SensorBatch,
    batch_from_wire,
    error_message,
)

log = logging.getLogger(__name__)

_BUNDLE_FILE = re.compile(r"bundle-(DCL|CL)-v(\d+)\.json$")


def now_ms() -> int:
    return int(time.time() * 1000)


class ModelStore:
    """Latest published bundle per model kind, with monotonic versions."""

    def __init__(self, persist_dir: str | Path | None = None) -> None:
        self._lock = threading.Lock()
        self._bundles: dict[str, ParameterBundle] = {}
        self._versions: dict[str, int] = {}
        self._persist_dir = Path(persist_dir) if persist_dir is not None else None
        if self._persist_dir is not None:
            self._persist_dir.mkdir(parents=True, exist_ok=True)
            self._load_persisted()

    def _load_persisted(self) -> None:
        assert self._persist_dir is not None
        latest: dict[str, tuple[int, Path]] = {}
        for path in self._persist_dir.iterdir():
            m = _BUNDLE_FILE.match(path.name)
            if not m:
                continue
            kind, version = m.group(1), int(m.group(2))
            if kind not in latest or version > latest[kind][0]:
                latest[kind] = (version, path)
        for kind, (version, path) in latest.items():
            try:
                bundle = decode_bundle(path.read_bytes())
            except BundleError as exc:
                log.warning("skipping corrupt bundle file %s: %s", path, exc)
                self._versions[kind] = max(self._versions.get(kind, 0), version)
                continue
            self._bundles[kind] = bundle
            self._versions[kind] = version

    def publish(
        self,
        model_kind: str,
        params: NetworkParameters,
        thresholds: ThresholdVector | None = None,
        created_at: int | None = None,
    ) -> ParameterBundle:
        """Wrap freshly trained parameters into the next-version bundle and
        make it the one clients receive."""
        with self._lock:
            version = self._versions.get(model_kind, 0) + 1
            bundle = ParameterBundle(
                model_kind=model_kind,
                params=replace(params, version=version),
                model_version=version,
                created_at=now_ms() if created_at is None else created_at,
                thresholds=thresholds,
            )
            self._bundles[model_kind] = bundle
            self._versions[model_kind] = version
        if self._persist_dir is not None:
            path = self._persist_dir / f"bundle-{model_kind}-v{version}.json"
            path.write_bytes(encode_bundle(bundle))
        return bundle

    def get(self, model_kind: str) -> ParameterBundle | None:
        with self._lock:
            return self._bundles.get(model_kind)

    def kinds(self) -> list[str]:
        with self._lock:
            return sorted(self._bundles)


class MemoryDataSink:
    """Thread-safe accumulator of uploaded (reading, label) pairs."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._rows: list[tuple[SensorReading, int | None]] = []

    def store(self, batch: SensorBatch) -> int:
        labels = batch.labels or (None,) * len(batch.readings)
        with self._lock:
            self._rows.extend(zip(batch.readings, labels))
        return len(batch.readings)

    def __len__(self) -> int:
        with self._lock:
            return len(self._rows)

    def labeled_pairs(self) -> list[tuple[SensorReading, int]]:
        with self._lock:
            return [(r, lab) for r, lab in self._rows if lab is not None]


class JsonlDataSink(MemoryDataSink):
    """MemoryDataSink that also appends rows to a JSON-lines file and
    reloads them on startup."""

    def __init__(self, path: str | Path) -> None:
        super().__init__()
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if self.path.exists():
            self._load()

    def _load(self) -> None:
        with open(self.path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    obj = json.loads(line)
                    reading = SensorReading(
                        sensor_id=str(obj["sensor_id"]),
                        timestamp=int(obj["timestamp"]),
                        values=tuple(float(v) for v in obj["values"]),
                    )
                    label = obj.get("label")
                    self._rows.append(
                        (reading, int(label) if label is not None else None)
                    )
                except (KeyError, TypeError, ValueError) as exc:
                    log.warning("%s:%d: skipping corrupt row: %s", self.path, lineno, exc)

    def store(self, batch: SensorBatch) -> int:
        n = super().store(batch)
        labels = batch.labels or (None,) * len(batch.readings)
        with open(self.path, "a", encoding="utf-8") as fh:
            for reading, label in zip(batch.readings, labels):
                fh.write(
                    json.dumps(
                        {
                            "sensor_id": reading.sensor_id,
                            "timestamp": reading.timestamp,
                            "values": list(reading.values),
                            "label": label,
                        },
                        separators=(",", ":"),
                    )
                    + "\n"
                )
        return n


def handle_request(msg: dict, store: ModelStore, sink) -> tuple[dict, bool]:
    """Dispatch one decoded request; returns (response, keep_connection)."""
    kind = msg.get("type")
    if kind == MSG_PING:
        return {"type": MSG_PONG}, True
    if kind == MSG_GET_PARAMS:
        model_kind = msg.get("model_kind")
        if model_kind not in MODEL_KINDS:
            return error_message("bad_model_kind", f"unknown model kind {model_kind!r}"), True
        bundle = store.get(model_kind)
        if bundle is None:
            return {
                "type": MSG_NOT_READY,
                "model_kind": model_kind,
                "available": store.kinds(),
            }, True
        return {
            "type": MSG_PARAMS,
            "model_kind": model_kind,
            "model_version": bundle.model_version,
            "bundle": encode_bundle(bundle).decode("utf-8"),
        }, True
    if kind == MSG_PUSH_DATA:
        try:
            batch = batch_from_wire(msg.get("batch") or {})
        except ProtocolError as exc:
            return error_message("bad_batch", str(exc)), True
        stored = sink.store(batch)
        return {"type": MSG_ACK, "stored": stored}, True
    return error_message("bad_type", f"unknown message type {kind!r}"), True


class _Handler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        server: ParameterServer = self.server.ctx_server  # type: ignore[attr-defined]
        sock = self.request
        while True:
            try:
                payload = protocol.recv_frame(sock)
            except protocol.FrameTooLargeError as exc:
                # the stream offset is unknown past an oversized header;
                # answer once, then drop the connection
                self._safe_send(sock, error_message("frame_too_large", str(exc)))
                return
            except (ProtocolError, OSError):
                return
            if payload is None:
                return
            try:
                msg = protocol.decode_message(payload)
            except ProtocolError as exc:
                if not self._safe_send(sock, error_message("bad_message", str(exc))):
                    return
                continue
            response, keep = handle_request(msg, server.model_store, server.data_sink)
            if not self._safe_send(sock, response) or not keep:
                return

    @staticmethod
    def _safe_send(sock, msg: dict) -> bool:
        try:
            protocol.send_frame(sock, protocol.encode_message(msg))
            return True
        except OSError:
            return False


class _ThreadingServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class ParameterServer:
    """Accepts framed requests on a TCP address; thread-per-connection."""

    def __init__(
        self,
        listen_addr: tuple[str, int],
        model_store: ModelStore,
        data_sink: MemoryDataSink,
    ) -> None:
        self.model_store = model_store
        self.data_sink = data_sink
        self._tcp = _ThreadingServer(listen_addr, _Handler)
        self._tcp.ctx_server = self  # type: ignore[attr-defined]
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._tcp.server_address[:2]  # type: ignore[return-value]

    def start(self) -> tuple[str, int]:
        self._thread = threading.Thread(
            target=self._tcp.serve_forever, name="param-server", daemon=True
        )
        self._thread.start()
        return self.address

    def serve_forever(self) -> None:
        self._tcp.serve_forever()

    def stop(self) -> None:
        self._tcp.shutdown()
        self._tcp.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5.0)
            self._thread = None


def server_serve(
    listen_addr: tuple[str, int],
    model_store: ModelStore,
    data_sink: MemoryDataSink,
) -> None:
    """Run the parameter server on the calling thread until interrupted."""
    server = ParameterServer(listen_addr, model_store, data_sink)
    log.info("parameter server listening on %s:%d", *server.address)
    try:
        server.serve_forever()
    finally:
        server.stop()
