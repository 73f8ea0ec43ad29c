"""Server/client integration over real loopback TCP plus sync/upload policy
against fake transports."""

import socket
import threading

import numpy as np
import pytest

from edgectx.bundle import decode_bundle, encode_bundle
from edgectx.client import (
    EdgeClient,
    SyncPolicy,
    SyncState,
    Uploader,
    client_sync_tick,
    upload_batch,
)
from edgectx.data import SensorReading, normalize_minmax, synth_still_motion
from edgectx.learners import NeverSyncedError, cl_train, dcl_train
from edgectx.nn import LayerSpec, TrainingConfig, forward
from edgectx.protocol import (
    SensorBatch,
    TcpTransport,
    TransportError,
    batch_to_wire,
    decode_message,
    encode_message,
    recv_frame,
    send_frame,
)
from edgectx.server import (
    JsonlDataSink,
    MemoryDataSink,
    ModelStore,
    ParameterServer,
    handle_request,
)


@pytest.fixture(scope="module")
def trained_dcl():
    data = normalize_minmax(synth_still_motion(150, 3))
    return dcl_train(data, LayerSpec(2, (2,), 2), TrainingConfig(0.3, 30, 1))


@pytest.fixture(scope="module")
def trained_cl():
    data = normalize_minmax(synth_still_motion(150, 3))
    return cl_train(data, TrainingConfig(0.05, 30, 1))


@pytest.fixture
def server():
    store = ModelStore()
    sink = MemoryDataSink()
    srv = ParameterServer(("127.0.0.1", 0), store, sink)
    srv.start()
    yield srv
    srv.stop()


def make_batch(n=5, sensor="acc0", start=0):
    return SensorBatch(
        "client-1",
        tuple(SensorReading(sensor, start + i, (0.1, 0.2)) for i in range(n)),
        labels=tuple(i % 2 for i in range(n)),
    )


class TestServer:
    def test_get_params_before_any_publish(self, server):
        tp = TcpTransport(server.address)
        response = tp.request({"type": "GET_PARAMS", "model_kind": "DCL"})
        assert response["type"] == "NOT_READY"
        assert response["available"] == []
        tp.close()

    def test_push_data_ack_and_sink_growth(self, server):
        tp = TcpTransport(server.address)
        response = tp.request(
            {"type": "PUSH_DATA", "batch": batch_to_wire(make_batch(50))}
        )
        assert response == {"type": "ACK", "stored": 50}
        assert len(server.data_sink) == 50
        tp.close()

    def test_sequential_publishes_bump_version_by_one(self, server, trained_dcl):
        server.model_store.publish("DCL", trained_dcl)
        tp = TcpTransport(server.address)
        first = tp.request({"type": "GET_PARAMS", "model_kind": "DCL"})
        server.model_store.publish("DCL", trained_dcl)
        second = tp.request({"type": "GET_PARAMS", "model_kind": "DCL"})
        assert second["model_version"] == first["model_version"] + 1
        tp.close()

    def test_published_bundle_forward_equivalence(self, server, trained_dcl):
        server.model_store.publish("DCL", trained_dcl)
        tp = TcpTransport(server.address)
        response = tp.request({"type": "GET_PARAMS", "model_kind": "DCL"})
        bundle = decode_bundle(response["bundle"].encode())
        for x in ([0.1, 0.9], [0.5, 0.5], [0.9, 0.2]):
            server_out = forward(trained_dcl, x).final_outputs
            wire_out = forward(bundle.params, x).final_outputs
            assert np.max(np.abs(server_out - wire_out)) <= 1e-12
        tp.close()

    def test_cl_bundle_ships_thresholds(self, server, trained_cl):
        server.model_store.publish("CL", trained_cl.params, trained_cl.thresholds)
        tp = TcpTransport(server.address)
        response = tp.request({"type": "GET_PARAMS", "model_kind": "CL"})
        bundle = decode_bundle(response["bundle"].encode())
        assert bundle.thresholds is not None
        assert bundle.thresholds == trained_cl.thresholds
        tp.close()

    def test_malformed_frame_keeps_connection_usable(self, server):
        sock = socket.create_connection(server.address, timeout=2)
        send_frame(sock, b"not json at all")
        response = decode_message(recv_frame(sock))
        assert response["type"] == "ERROR"
        send_frame(sock, encode_message({"type": "PING"}))
        assert decode_message(recv_frame(sock))["type"] == "PONG"
        sock.close()

    def test_unknown_type_gets_error_response(self, server):
        tp = TcpTransport(server.address)
        response = tp.request({"type": "WHATEVER"})
        assert response["type"] == "ERROR" and response["code"] == "bad_type"
        tp.close()

    def test_bad_model_kind(self, server):
        tp = TcpTransport(server.address)
        response = tp.request({"type": "GET_PARAMS", "model_kind": "LOL"})
        assert response["type"] == "ERROR"
        tp.close()

    def test_not_ready_lists_available_kinds(self, server, trained_dcl):
        server.model_store.publish("DCL", trained_dcl)
        tp = TcpTransport(server.address)
        response = tp.request({"type": "GET_PARAMS", "model_kind": "CL"})
        assert response["type"] == "NOT_READY"
        assert response["available"] == ["DCL"]
        tp.close()

    def test_concurrent_clients(self, server, trained_dcl):
        server.model_store.publish("DCL", trained_dcl)
        errors = []

        def worker():
            try:
                tp = TcpTransport(server.address)
                for _ in range(20):
                    r = tp.request({"type": "GET_PARAMS", "model_kind": "DCL"})
                    assert r["type"] == "PARAMS"
                tp.close()
            except Exception as exc:  # noqa: BLE001
                errors.append(exc)

        threads = [threading.Thread(target=worker) for _ in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join(timeout=10)
        assert not errors


class TestModelStorePersistence:
    def test_version_continues_after_restart(self, tmp_path, trained_dcl):
        store = ModelStore(persist_dir=tmp_path)
        store.publish("DCL", trained_dcl)
        store.publish("DCL", trained_dcl)
        reloaded = ModelStore(persist_dir=tmp_path)
        assert reloaded.get("DCL").model_version == 2
        assert reloaded.publish("DCL", trained_dcl).model_version == 3

    def test_reloaded_bundle_bytes_identical(self, tmp_path, trained_dcl):
        store = ModelStore(persist_dir=tmp_path)
        published = store.publish("DCL", trained_dcl)
        reloaded = ModelStore(persist_dir=tmp_path).get("DCL")
        assert encode_bundle(reloaded) == encode_bundle(published)


class TestJsonlSink:
    def test_rows_survive_restart(self, tmp_path):
        path = tmp_path / "readings.jsonl"
        sink = JsonlDataSink(path)
        sink.store(make_batch(7))
        again = JsonlDataSink(path)
        assert len(again) == 7
        assert len(again.labeled_pairs()) == 7


class FakeTransport:
    """In-process transport with a switchable link."""

    def __init__(self, store: ModelStore | None = None, sink=None):
        self.store = store or ModelStore()
        self.sink = sink if sink is not None else MemoryDataSink()
        self.down = False
        self.requests = 0

    def request(self, msg, timeout=None):
        self.requests += 1
        if self.down:
            raise TransportError("link down")
        response, _ = handle_request(msg, self.store, self.sink)
        return response


class TestClientSync:
    def test_first_sync_adopts_bundle(self, trained_dcl):
        ft = FakeTransport()
        ft.store.publish("DCL", trained_dcl)
        state = client_sync_tick(SyncState(), ft, "DCL", now_ms=1000)
        assert state.model_version == 1
        assert state.last_sync_at == 1000
        assert state.consecutive_failures == 0

    def test_newer_version_swaps(self, trained_dcl):
        ft = FakeTransport()
        ft.store.publish("DCL", trained_dcl)
        state = client_sync_tick(SyncState(), ft, "DCL", now_ms=1000)
        ft.store.publish("DCL", trained_dcl)
        state = client_sync_tick(state, ft, "DCL", now_ms=2000)
        assert state.model_version == 2

    def test_same_version_refreshes_timestamp_only(self, trained_dcl):
        ft = FakeTransport()
        ft.store.publish("DCL", trained_dcl)
        state = client_sync_tick(SyncState(), ft, "DCL", now_ms=1000)
        bundle_before = state.current_bundle
        state = client_sync_tick(state, ft, "DCL", now_ms=5000)
        assert state.current_bundle is bundle_before
        assert state.last_sync_at == 5000

    def test_failure_keeps_bundle_and_counts(self, trained_dcl):
        ft = FakeTransport()
        ft.store.publish("DCL", trained_dcl)
        state = client_sync_tick(SyncState(), ft, "DCL", now_ms=1000)
        ft.down = True
        for i in range(1, 6):
            state = client_sync_tick(state, ft, "DCL", now_ms=1000 + i)
            assert state.consecutive_failures == i
            assert state.model_version == 1
        ft.down = False
        state = client_sync_tick(state, ft, "DCL", now_ms=9000)
        assert state.consecutive_failures == 0

    def test_not_ready_counts_as_contact(self):
        ft = FakeTransport()
        state = client_sync_tick(SyncState(consecutive_failures=3), ft, "DCL", now_ms=50)
        assert state.consecutive_failures == 0
        assert state.current_bundle is None
        assert state.last_sync_at == 50

    def test_staleness(self, trained_dcl):
        ft = FakeTransport()
        bundle = ft.store.publish("DCL", trained_dcl, created_at=1_000)
        state = client_sync_tick(SyncState(), ft, "DCL", now_ms=1_500)
        assert state.staleness_ms(4_000) == 3_000
        assert SyncState().staleness_ms(99) is None

    def test_predictions_never_touch_network(self, trained_dcl):
        ft = FakeTransport()
        ft.store.publish("DCL", trained_dcl)
        client = EdgeClient(ft, "DCL", SyncPolicy(period_ms=100, timeout_s=0.1))
        client.sync_tick(now_ms=0)
        requests_after_sync = ft.requests
        ft.down = True
        for _ in range(100):
            client.predict((0.4, 0.6))
        assert ft.requests == requests_after_sync

    def test_predict_before_any_sync_raises(self):
        client = EdgeClient(FakeTransport(), "DCL")
        with pytest.raises(NeverSyncedError):
            client.predict((0.1, 0.2))

    def test_lcl_client_path(self, trained_cl):
        ft = FakeTransport()
        ft.store.publish("CL", trained_cl.params, trained_cl.thresholds)
        client = EdgeClient(ft, "CL")
        client.sync_tick(now_ms=0)
        label = client.predict((0.05, 0.1))
        assert label.class_index in (0, 1)


class TestUploader:
    def test_healthy_link_acks_full_batch(self):
        ft = FakeTransport()
        uploader = Uploader(ft)
        assert uploader.upload_batch(make_batch(10)) == 10
        assert uploader.queued_count == 0
        assert len(ft.sink) == 10

    def test_offline_batches_replayed_in_order(self):
        ft = FakeTransport()
        uploader = Uploader(ft, retries=0)
        ft.down = True
        for i in range(3):
            assert uploader.upload_batch(make_batch(4, start=100 * i)) == 0
        assert uploader.queued_count == 12
        ft.down = False
        acked = uploader.upload_batch(make_batch(4, start=1000))
        assert acked == 16
        assert uploader.queued_count == 0
        timestamps = [r.timestamp for r, _ in ft.sink.labeled_pairs()]
        assert timestamps == sorted(timestamps)

    def test_capacity_drops_oldest(self):
        ft = FakeTransport()
        ft.down = True
        uploader = Uploader(ft, capacity=100, retries=0)
        uploader.upload_batch(make_batch(100, start=0))
        uploader.upload_batch(make_batch(50, start=10_000))
        assert uploader.queued_count == 100
        assert uploader.dropped_count == 50

    def test_spool_survives_restart(self, tmp_path):
        spool = tmp_path / "spool.jsonl"
        ft = FakeTransport()
        ft.down = True
        uploader = Uploader(ft, retries=0, spool_path=spool)
        uploader.upload_batch(make_batch(6))
        assert spool.exists()
        revived = Uploader(ft, retries=0, spool_path=spool)
        assert revived.queued_count == 6
        ft.down = False
        assert revived.flush() == 6

    def test_one_shot_helper_retries_then_raises(self):
        ft = FakeTransport()
        ft.down = True
        with pytest.raises(TransportError):
            upload_batch(ft, make_batch(2), retries=2)
        assert ft.requests == 3
        ft.down = False
        assert upload_batch(ft, make_batch(2)) == 2
