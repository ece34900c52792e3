import socket
import struct
import threading
import time

import pytest

from trafficbridge import traci_client as client
from trafficbridge import traci_codec as codec
from trafficbridge import traci_constants as tc

from conftest import TWO_PHASE_PROGRAM, make_scenario, make_vehicle


def open_session(server):
    return client.connect(*server.address, retry_policy=client.RetryPolicy(retries=0), timeout=5.0)


def test_connect_performs_handshake(empty_server):
    session = open_session(empty_server)
    try:
        assert session.api_version == tc.API_VERSION
        assert session.server_version.startswith("MockTraffic")
    finally:
        session.close()


def test_connect_to_closed_port_retries_then_refuses():
    # Grab a port and close it so nothing listens there.
    probe = socket.socket()
    probe.bind(("127.0.0.1", 0))
    port = probe.getsockname()[1]
    probe.close()

    started = time.monotonic()
    with pytest.raises(client.ConnectionRefused):
        client.connect("127.0.0.1", port, retry_policy=client.RetryPolicy(retries=3, delay=0.1))
    elapsed = time.monotonic() - started
    assert 0.25 <= elapsed < 1.5


def test_server_close_yields_connection_lost():
    listener = socket.socket()
    listener.bind(("127.0.0.1", 0))
    listener.listen(1)
    port = listener.getsockname()[1]

    def accept_and_close():
        conn, _ = listener.accept()
        conn.close()

    thread = threading.Thread(target=accept_and_close, daemon=True)
    thread.start()
    with pytest.raises(client.ConnectionLost):
        client.connect("127.0.0.1", port, retry_policy=client.RetryPolicy(retries=0))
    thread.join()
    listener.close()


def test_handshake_mismatch_on_ancient_server():
    listener = socket.socket()
    listener.bind(("127.0.0.1", 0))
    listener.listen(1)
    port = listener.getsockname()[1]

    def serve_old_version():
        conn, _ = listener.accept()
        # Consume the getversion request, answer with an unsupported API level.
        header = conn.recv(4)
        (total,) = struct.unpack(">I", header)
        conn.recv(total - 4)
        payload = struct.pack(">i", 5) + codec.encode_string("Ancient/0.1")
        reply = codec.TraciMessage(
            (
                codec.build_status(tc.CMD_GET_VERSION, codec.Result.OK),
                codec.TraciCommand(tc.CMD_GET_VERSION, payload),
            )
        )
        conn.sendall(codec.encode_message(reply))
        conn.close()

    thread = threading.Thread(target=serve_old_version, daemon=True)
    thread.start()
    with pytest.raises(client.HandshakeMismatch):
        client.connect("127.0.0.1", port, retry_policy=client.RetryPolicy(retries=0))
    thread.join()
    listener.close()


def test_step_reports_departure(mock_server_factory):
    server = mock_server_factory(make_scenario([make_vehicle(depart=0.1)]))
    session = open_session(server)
    try:
        result = session.step()
        assert result.sim_time == pytest.approx(0.1)
        assert result.departed_ids == ("veh0",)
        assert result.arrived_ids == ()
    finally:
        session.close()


def test_step_on_empty_scenario(empty_server):
    session = open_session(empty_server)
    try:
        result = session.step()
        assert result.departed_ids == ()
        assert result.arrived_ids == ()
    finally:
        session.close()


def test_consecutive_steps_increase_time_by_step_length(empty_server):
    session = open_session(empty_server)
    try:
        times = [session.step().sim_time for _ in range(5)]
        assert session.get_step_length() == pytest.approx(0.1)
        deltas = [b - a for a, b in zip(times, times[1:])]
        assert all(d == pytest.approx(0.1, abs=1e-9) for d in deltas)
        assert times == sorted(times)
    finally:
        session.close()


def test_vehicle_state_matches_script(mock_server_factory):
    vehicle = make_vehicle(route=((100.0, 50.0), (200.0, 50.0)), speed=0.0)
    server = mock_server_factory(make_scenario([vehicle]))
    session = open_session(server)
    try:
        session.step()
        state = session.get_vehicle_state("veh0")
        assert state.position == (100.0, 50.0)
        assert state.angle == pytest.approx(90.0)
        assert state.speed == 0.0
        assert state.vtype == "car"
    finally:
        session.close()


def test_arrived_vehicle_is_unknown(mock_server_factory):
    vehicle = make_vehicle(route=((0, 0), (1, 0)), speed=10.0)
    server = mock_server_factory(make_scenario([vehicle]))
    session = open_session(server)
    try:
        session.step()  # departs and arrives within the step (0.1 s covers 1 m)
        with pytest.raises(client.UnknownVehicle):
            session.get_vehicle_state("veh0")
    finally:
        session.close()


def test_light_states_follow_program(mock_server_factory):
    server = mock_server_factory(make_scenario(lights=[TWO_PHASE_PROGRAM]))
    session = open_session(server)
    try:
        session.step(2.0)
        assert session.get_traffic_light_state("J1") == "GrGr"
        session.step(7.0)
        assert session.get_traffic_light_state("J1") == "rGrG"
        with pytest.raises(client.UnknownJunction):
            session.get_traffic_light_state("nope")
    finally:
        session.close()


def test_batched_vehicle_query_skips_unknown(mock_server_factory):
    server = mock_server_factory(make_scenario([make_vehicle()]))
    session = open_session(server)
    try:
        session.step()
        states = session.get_vehicle_states(["veh0", "ghost"])
        assert set(states) == {"veh0"}
    finally:
        session.close()


def test_request_after_server_stop_is_connection_lost(mock_server_factory):
    server = mock_server_factory(make_scenario())
    session = open_session(server)
    server.stop()
    with pytest.raises(client.ConnectionLost):
        for _ in range(3):
            session.step()
