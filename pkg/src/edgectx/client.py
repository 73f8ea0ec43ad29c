"""Edge-side sync loop, upload queue, and prediction wrapper.

The client polls the server for newer parameter bundles on a fixed period.
A failed poll never touches the bundle it already holds, so prediction
keeps working on stale parameters for as long as the link is down; the only
cost is accuracy, never availability.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from collections import deque
from dataclasses import dataclass, replace
from pathlib import Path

from .bundle import (
    MODEL_KIND_CL,
    MODEL_KIND_DCL,
    BundleError,
    ParameterBundle,
    decode_bundle,
)
from .data import SensorReading
from .learners import ContextLabel, NeverSyncedError, adcl_predict, lcl_predict
from .protocol import (
    MSG_ACK,
    MSG_GET_PARAMS,
    MSG_NOT_READY,
    MSG_PARAMS,
    MSG_PUSH_DATA,
    SensorBatch,
    TransportError,
    batch_to_wire,
)

log = logging.getLogger(__name__)

DEFAULT_SYNC_PERIOD_MS = 30_000
DEFAULT_SYNC_TIMEOUT_S = 2.0
DEFAULT_QUEUE_CAPACITY = 10_000


@dataclass(frozen=True)
class SyncPolicy:
    period_ms: int = DEFAULT_SYNC_PERIOD_MS
    timeout_s: float = DEFAULT_SYNC_TIMEOUT_S

    def __post_init__(self) -> None:
        if self.period_ms < 1 or self.timeout_s <= 0:
            raise ValueError("period and timeout must be positive")


@dataclass(frozen=True)
class SyncState:
    """What the client knows about its parameters and the link."""

    current_bundle: ParameterBundle | None = None
    last_sync_at: int | None = None  # ms
    consecutive_failures: int = 0

    def staleness_ms(self, now_ms: int) -> int | None:
        """Age of the held bundle; None before the first sync."""
        if self.current_bundle is None:
            return None
        return now_ms - self.current_bundle.created_at

    @property
    def model_version(self) -> int | None:
        return self.current_bundle.model_version if self.current_bundle else None


def client_sync_tick(
    state: SyncState,
    transport,
    model_kind: str,
    policy: SyncPolicy = SyncPolicy(),
    now_ms: int | None = None,
) -> SyncState:
    """One poll of the server for parameters of ``model_kind``.

    Success with a newer model_version swaps the bundle; success with the
    same (or older) version just refreshes last_sync_at. Any failure leaves
    the current bundle untouched and bumps consecutive_failures, so
    prediction stays available throughout.
    """
    t = int(time.time() * 1000) if now_ms is None else now_ms
    try:
        response = transport.request(
            {"type": MSG_GET_PARAMS, "model_kind": model_kind}, timeout=policy.timeout_s
        )
    except TransportError as exc:
        log.debug("sync failed (%s); keeping current parameters", exc)
        return replace(state, consecutive_failures=state.consecutive_failures + 1)
    if response.get("type") == MSG_NOT_READY:
        return replace(state, last_sync_at=t, consecutive_failures=0)
    if response.get("type") != MSG_PARAMS:
        return replace(state, consecutive_failures=state.consecutive_failures + 1)
    try:
        bundle = decode_bundle(str(response.get("bundle", "")).encode("utf-8"))
    except BundleError as exc:
        log.warning("received undecodable bundle: %s", exc)
        return replace(state, consecutive_failures=state.consecutive_failures + 1)
    if bundle.model_kind != model_kind:
        return replace(state, consecutive_failures=state.consecutive_failures + 1)
    held = state.model_version
    if held is not None and bundle.model_version <= held:
        return replace(state, last_sync_at=t, consecutive_failures=0)
    return SyncState(current_bundle=bundle, last_sync_at=t, consecutive_failures=0)


class Uploader:
    """At-least-once delivery of sensor batches with a bounded retry queue.

    Readings that cannot be delivered are queued (oldest dropped beyond the
    capacity, with a counter) and replayed, in order, before the next
    batch once the link recovers. An optional spool file makes the queue
    survive restarts.
    """

    def __init__(
        self,
        transport,
        *,
        capacity: int = DEFAULT_QUEUE_CAPACITY,
        retries: int = 1,
        spool_path: str | Path | None = None,
    ) -> None:
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self._transport = transport
        self._capacity = capacity
        self._retries = max(0, retries)
        self._queue: deque[tuple[str, SensorReading, int | None]] = deque()
        self.dropped_count = 0
        self._spool_path = Path(spool_path) if spool_path is not None else None
        if self._spool_path is not None and self._spool_path.exists():
            self._load_spool()

    @property
    def queued_count(self) -> int:
        return len(self._queue)

    def upload_batch(self, batch: SensorBatch) -> int:
        """Deliver queued readings, then this batch. Returns the number of
        readings acknowledged by the server during this call."""
        replayed = self._replay()
        if replayed is None:
            self._enqueue(batch)
            return 0
        sent = self._send_rows(
            [
                (batch.client_id, r, batch.labels[i] if batch.labels else None)
                for i, r in enumerate(batch.readings)
            ]
        )
        if sent is None:
            self._enqueue(batch)
            return replayed
        return replayed + sent

    def flush(self) -> int:
        """Try to deliver everything queued; returns readings acknowledged."""
        replayed = self._replay()
        return 0 if replayed is None else replayed

    def _replay(self) -> int | None:
        """Deliver the whole queue in order; acked count when it fully
        drains, None when the link gives out part-way."""
        acked = 0
        while self._queue:
            # one wire batch per run of same client and label presence
            rows = [self._queue.popleft()]
            key = (rows[0][0], rows[0][2] is not None)
            while self._queue and (self._queue[0][0], self._queue[0][2] is not None) == key:
                rows.append(self._queue.popleft())
            sent = self._send_rows(rows)
            if sent is None:
                for row in reversed(rows):
                    self._queue.appendleft(row)
                self._save_spool()
                return None
            acked += sent
        self._save_spool()
        return acked

    def _send_rows(
        self, rows: list[tuple[str, SensorReading, int | None]]
    ) -> int | None:
        """Send one batch; acked count, or None on link failure."""
        labeled = all(label is not None for _, _, label in rows)
        batch = SensorBatch(
            client_id=rows[0][0],
            readings=tuple(r for _, r, _ in rows),
            labels=tuple(label for _, _, label in rows) if labeled else None,
        )
        for _ in range(self._retries + 1):
            try:
                response = self._transport.request(
                    {"type": MSG_PUSH_DATA, "batch": batch_to_wire(batch)}
                )
            except TransportError:
                continue
            if response.get("type") == MSG_ACK:
                return int(response.get("stored", len(batch)))
            break
        return None

    def _enqueue(self, batch: SensorBatch) -> None:
        for i, reading in enumerate(batch.readings):
            label = batch.labels[i] if batch.labels else None
            self._queue.append((batch.client_id, reading, label))
        while len(self._queue) > self._capacity:
            self._queue.popleft()
            self.dropped_count += 1
        self._save_spool()

    def _load_spool(self) -> None:
        assert self._spool_path is not None
        with open(self._spool_path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                try:
                    obj = json.loads(line)
                    reading = SensorReading(
                        str(obj["sensor_id"]), int(obj["timestamp"]),
                        tuple(float(v) for v in obj["values"]),
                    )
                    label = obj.get("label")
                    self._queue.append(
                        (str(obj["client_id"]), reading,
                         int(label) if label is not None else None)
                    )
                except (KeyError, TypeError, ValueError) as exc:
                    log.warning("skipping corrupt spool row: %s", exc)

    def _save_spool(self) -> None:
        if self._spool_path is None:
            return
        tmp = self._spool_path.with_suffix(".tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            for client_id, reading, label in self._queue:
                fh.write(
                    json.dumps(
                        {
                            "client_id": client_id,
                            "sensor_id": reading.sensor_id,
                            "timestamp": reading.timestamp,
                            "values": list(reading.values),
                            "label": label,
                        },
                        separators=(",", ":"),
                    )
                    + "\n"
                )
        tmp.replace(self._spool_path)


def upload_batch(transport, batch: SensorBatch, retries: int = 2) -> int:
    """One-shot upload with bounded retries; raises TransportError when the
    link stays down. Use Uploader for queue-and-replay semantics."""
    last: TransportError | None = None
    for _ in range(retries + 1):
        try:
            response = transport.request(
                {"type": MSG_PUSH_DATA, "batch": batch_to_wire(batch)}
            )
        except TransportError as exc:
            last = exc
            continue
        return int(response.get("stored", 0))
    assert last is not None
    raise last


class EdgeClient:
    """Prediction plus background parameter sync for one model kind.

    The state slot holds an immutable snapshot; the sync loop replaces the
    whole reference, so a concurrent prediction always reads one coherent
    bundle.
    """

    def __init__(
        self,
        transport,
        model_kind: str = MODEL_KIND_DCL,
        policy: SyncPolicy = SyncPolicy(),
    ) -> None:
        self._transport = transport
        self.model_kind = model_kind
        self.policy = policy
        self._state = SyncState()
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    @property
    def state(self) -> SyncState:
        return self._state

    def sync_tick(self, now_ms: int | None = None) -> SyncState:
        self._state = client_sync_tick(
            self._state, self._transport, self.model_kind, self.policy, now_ms
        )
        return self._state

    def predict(self, features) -> ContextLabel:
        snapshot = self._state
        if snapshot.current_bundle is None:
            raise NeverSyncedError("no parameters synced yet")
        bundle = snapshot.current_bundle
        if bundle.model_kind == MODEL_KIND_CL:
            return lcl_predict(bundle.as_cl_model(), features)
        return adcl_predict(bundle.params, features)

    def start_sync_loop(self) -> None:
        if self._thread is not None:
            return
        self._stop.clear()

        def loop() -> None:
            while not self._stop.is_set():
                self.sync_tick()
                self._stop.wait(self.policy.period_ms / 1000.0)

        self._thread = threading.Thread(target=loop, name="sync-loop", daemon=True)
        self._thread.start()

    def stop_sync_loop(self) -> None:
        if self._thread is None:
            return
        self._stop.set()
        self._thread.join(timeout=5.0)
        self._thread = None
