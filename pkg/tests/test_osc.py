import json
import math
import random
import socket
import struct
import subprocess
from pathlib import Path

import pytest

from trafficbridge import osc
from trafficbridge.bridge import SceneSnapshot, SnapshotStats, SnapshotVehicle

DECODER_DIR = Path(__file__).resolve().parent.parent / "tools" / "osc_decode"


def third_party_decode(data: bytes) -> dict:
    if not (DECODER_DIR / "node_modules").exists():
        subprocess.run(
            ["npm", "install", "--no-audit", "--no-fund"],
            cwd=DECODER_DIR, check=True, capture_output=True, timeout=300,
        )
    proc = subprocess.run(
        ["node", "decode.mjs"],
        cwd=DECODER_DIR, input=data.hex(), text=True,
        capture_output=True, check=True, timeout=60,
    )
    return json.loads(proc.stdout)


def make_snapshot(vehicles=(), sim_time=1.5, listener=(0.0, 0.0, 0.0)):
    stats = SnapshotStats(
        active=len(vehicles), pooled_free=0, culled=0, sim_time=sim_time, step_lag=0.0
    )
    return SceneSnapshot(
        tick_time=sim_time,
        vehicles=tuple(vehicles),
        lights=(),
        listener=listener,
        culling_radius=300.0,
        stats=stats,
    )


def vehicle(vid="veh0", x=0.0, y=0.0, z=0.0, speed=10.0, accel=0.5, yaw=0.0):
    return SnapshotVehicle(
        id=vid, position=(x, y, z), yaw=yaw, pitch=0.0, vtype="car",
        speed=speed, acceleration=accel,
    )


def record_at(position, velocity, t):
    return osc.OscVehicleRecord(osc.LastSent(position, velocity, t))


CONFIG = osc.OscConfig(send_interval=0.05, delta_pos=0.5, delta_vel=0.5, keep_alive=5.0)


# -- gating -----------------------------------------------------------------

def test_never_sent_fires_first_transmission():
    ok, reason = osc.should_send(None, (0, 0, 0), 0.0, now=0.0, config=CONFIG)
    assert ok and reason is osc.SendReason.FIRST_TRANSMISSION
    ok, reason = osc.should_send(osc.OscVehicleRecord(), (0, 0, 0), 0.0, 0.0, CONFIG)
    assert ok and reason is osc.SendReason.FIRST_TRANSMISSION


def test_small_motion_below_thresholds_is_gated_off():
    record = record_at((0.0, 0.0, 0.0), 10.0, t=0.0)
    ok, reason = osc.should_send(record, (0.4, 0.0, 0.0), 10.0, now=1.0, config=CONFIG)
    assert not ok and reason is None


def test_position_threshold_fires():
    record = record_at((0.0, 0.0, 0.0), 10.0, t=0.0)
    ok, reason = osc.should_send(record, (0.51, 0.0, 0.0), 10.0, now=1.0, config=CONFIG)
    assert ok and reason is osc.SendReason.THRESHOLD


def test_velocity_threshold_fires():
    record = record_at((0.0, 0.0, 0.0), 10.0, t=0.0)
    ok, reason = osc.should_send(record, (0.0, 0.0, 0.0), 10.6, now=1.0, config=CONFIG)
    assert ok and reason is osc.SendReason.THRESHOLD


def test_keep_alive_fires_after_interval():
    record = record_at((0.0, 0.0, 0.0), 10.0, t=0.0)
    ok, reason = osc.should_send(record, (0.0, 0.0, 0.0), 10.0, now=5.1, config=CONFIG)
    assert ok and reason is osc.SendReason.KEEP_ALIVE


def test_gate_thresholds_scale_with_engine_units():
    record = record_at((0.0, 0.0, 0.0), 10.0, t=0.0)
    # 60 engine units at 100 units/m is 0.6 m: above the 0.5 m threshold.
    ok, _ = osc.should_send(record, (60.0, 0.0, 0.0), 10.0, 1.0, CONFIG, units_per_meter=100.0)
    assert ok
    ok, _ = osc.should_send(record, (40.0, 0.0, 0.0), 10.0, 1.0, CONFIG, units_per_meter=100.0)
    assert not ok


def brute_force_gate(record, position, velocity, now, config):
    """Independent re-statement of the three transmission conditions."""
    if record is None or record.last_sent is None:
        return True
    dx = position[0] - record.last_sent.position[0]
    dy = position[1] - record.last_sent.position[1]
    dz = position[2] - record.last_sent.position[2]
    if (dx * dx + dy * dy + dz * dz) ** 0.5 > config.delta_pos:
        return True
    if abs(velocity - record.last_sent.velocity) > config.delta_vel:
        return True
    if now - record.last_sent.time >= config.keep_alive:
        return True
    return False


def test_gate_matches_brute_force_over_random_sequences():
    rng = random.Random(2024)
    config = osc.OscConfig(send_interval=0.05, delta_pos=0.5, delta_vel=0.5, keep_alive=2.0)
    record = None
    position = (0.0, 0.0, 0.0)
    velocity = 10.0
    now = 0.0
    mismatches = 0
    for _ in range(10_000):
        now += rng.uniform(0.0, 0.3)
        position = tuple(p + rng.uniform(-0.4, 0.4) for p in position)
        velocity = max(0.0, velocity + rng.uniform(-0.4, 0.4))
        got, _ = osc.should_send(record, position, velocity, now, config)
        want = brute_force_gate(record, position, velocity, now, config)
        if got != want:
            mismatches += 1
        if got:
            if record is None:
                record = osc.OscVehicleRecord()
            record.last_sent = osc.LastSent(position, velocity, now)
    assert mismatches == 0


# -- bundle assembly ---------------------------------------------------------

def test_empty_snapshot_yields_header_only():
    bundle, sent = osc.build_bundle(make_snapshot(), {}, now=0.0, config=CONFIG)
    assert sent == ()
    assert len(bundle.elements) == 1
    header = bundle.elements[0]
    assert header.address == osc.HEADER_ADDRESS
    assert header.args[0] == 1.5  # sim_time


def test_only_gated_vehicles_are_bundled():
    records = {
        "a": record_at((0.0, 0.0, 0.0), 10.0, t=0.9),
        "b": record_at((100.0, 0.0, 0.0), 10.0, t=0.9),
    }
    vehicles = [
        vehicle("a", x=0.1),               # below thresholds, recently sent
        vehicle("b", x=120.0),             # moved 20 m: passes
        vehicle("c", x=50.0),              # never sent: passes
    ]
    bundle, sent = osc.build_bundle(make_snapshot(vehicles), records, now=1.0, config=CONFIG)
    assert sent == ("b", "c")
    assert len(bundle.elements) == 3  # header + b + c
    assert records["a"].last_sent.time == 0.9  # untouched
    assert records["b"].last_sent.time == 1.0
    assert records["c"].last_sent.time == 1.0


def test_three_vehicles_one_passing_yields_two_messages():
    records = {
        "a": record_at((0.0, 0.0, 0.0), 10.0, t=0.9),
        "b": record_at((10.0, 0.0, 0.0), 10.0, t=0.9),
    }
    vehicles = [vehicle("a", x=0.1), vehicle("b", x=10.1), vehicle("c", x=999.0)]
    bundle, sent = osc.build_bundle(make_snapshot(vehicles), records, now=1.0, config=CONFIG)
    assert sent == ("c",)
    assert len(bundle.elements) == 2


def test_records_only_advance():
    records = {}
    now = 0.0
    rng = random.Random(5)
    last_time = {}
    for step in range(200):
        now += rng.uniform(0.01, 0.2)
        snapshot = make_snapshot([vehicle("a", x=rng.uniform(0, 100))], sim_time=now)
        osc.build_bundle(snapshot, records, now, CONFIG)
        if "a" in records:
            assert records["a"].last_sent.time >= last_time.get("a", 0.0)
            last_time["a"] = records["a"].last_sent.time


# -- encoding ----------------------------------------------------------------

def test_message_with_no_args_frozen_bytes():
    assert osc.encode_osc(osc.OscMessage("/a")) == bytes.fromhex("2f6100002c000000")


def test_int32_argument_appends_big_endian():
    wire = osc.encode_osc(osc.OscMessage("/a", (1,)))
    assert wire == bytes.fromhex("2f6100002c69000000000001".replace(" ", ""))
    assert wire.endswith(bytes.fromhex("00000001"))


def test_bundle_starts_with_bundle_literal_and_timetag():
    wire = osc.encode_osc(osc.OscBundle((osc.OscMessage("/a"),)))
    assert wire.startswith(b"#bundle\x00")
    assert wire[8:16] == struct.pack(">Q", 1)


def test_invalid_address_rejected():
    with pytest.raises(osc.InvalidAddress):
        osc.encode_osc(osc.OscMessage("nope", ()))


def test_unsupported_argument_rejected():
    with pytest.raises(osc.UnsupportedArgumentType):
        osc.encode_osc(osc.OscMessage("/a", (object(),)))
    with pytest.raises(osc.UnsupportedArgumentType):
        osc.encode_osc(osc.OscMessage("/a", (True,)))


def test_alignment_of_random_packets():
    rng = random.Random(31)
    for _ in range(300):
        args = []
        for _ in range(rng.randint(0, 6)):
            args.append(
                rng.choice(
                    [
                        rng.randint(-(2**31), 2**31 - 1),
                        osc.Float32(rng.uniform(-1e5, 1e5)),
                        rng.uniform(-1e5, 1e5),
                        "".join(rng.choice("abcdef/") for _ in range(rng.randint(0, 12))),
                        bytes(rng.randrange(256) for _ in range(rng.randint(0, 9))),
                    ]
                )
            )
        packet = osc.OscMessage("/x/" + "y" * rng.randint(0, 9), tuple(args))
        wire = osc.encode_osc(packet)
        assert len(wire) % 4 == 0
        bundled = osc.encode_osc(osc.OscBundle((packet, packet)))
        assert len(bundled) % 4 == 0


def test_one_vehicle_bundle_decodes_in_independent_decoder():
    snapshot = make_snapshot([vehicle("veh0", x=1.0, y=2.0, z=3.0, speed=13.9, accel=-0.25)],
                             sim_time=42.125, listener=(10.0, -20.0, 1.5))
    bundle, _ = osc.build_bundle(snapshot, {}, now=0.0, config=CONFIG)
    decoded = third_party_decode(osc.encode_osc(bundle))

    assert decoded["oscType"] == "bundle"
    header, veh = decoded["elements"]
    assert header["address"] == "/traffic/header"
    assert [a["type"] for a in header["args"]] == ["double", "float", "float", "float"]
    assert header["args"][0]["value"] == pytest.approx(42.125)
    assert header["args"][1]["value"] == pytest.approx(10.0)
    assert header["args"][3]["value"] == pytest.approx(1.5)

    assert veh["address"] == "/traffic/vehicle"
    assert [a["type"] for a in veh["args"]] == ["string"] + ["float"] * 5
    values = [a["value"] for a in veh["args"]]
    assert values[0] == "veh0"
    assert values[1:4] == pytest.approx([1.0, 2.0, 3.0])
    assert values[4] == pytest.approx(13.9, abs=1e-5)
    assert values[5] == pytest.approx(-0.25)


def test_velocity_vector_mode_expands_to_three_floats():
    config = osc.OscConfig(velocity_as_vector=True)
    snapshot = make_snapshot([vehicle("veh0", speed=10.0, yaw=90.0)])
    bundle, _ = osc.build_bundle(snapshot, {}, now=0.0, config=config)
    veh = bundle.elements[1]
    # id, x, y, z, vx, vy, vz, accel
    assert len(veh.args) == 8
    vx, vy = veh.args[4].value, veh.args[5].value
    assert vx == pytest.approx(0.0, abs=1e-9)
    assert vy == pytest.approx(10.0)


# -- transport ---------------------------------------------------------------

def test_loopback_listener_receives_exact_bytes():
    recv = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    recv.bind(("127.0.0.1", 0))
    recv.settimeout(5.0)
    port = recv.getsockname()[1]
    sender = osc.OscSender(osc.OscConfig(host="127.0.0.1", port=port))
    bundle, _ = osc.build_bundle(make_snapshot([vehicle()]), {}, now=0.0, config=CONFIG)
    sender.send(bundle)
    data, _ = recv.recvfrom(65536)
    assert data == osc.encode_osc(bundle)
    sender.close()
    recv.close()


def test_oversized_bundle_splits_with_repeated_header():
    vehicles = [vehicle(f"veh{i}", x=float(i)) for i in range(500)]
    bundle, _ = osc.build_bundle(make_snapshot(vehicles), {}, now=0.0, config=CONFIG)
    limit = 1472
    assert len(osc.encode_osc(bundle)) > limit
    parts = osc.split_bundle(bundle, limit)
    assert len(parts) > 1
    headers = {part.elements[0] for part in parts}
    assert headers == {bundle.elements[0]}
    total_vehicles = sum(len(part.elements) - 1 for part in parts)
    assert total_vehicles == 500
    for part in parts:
        assert len(osc.encode_osc(part)) <= limit


def test_split_sizes_match_byte_count_arithmetic():
    vehicles = [vehicle(f"veh{i}") for i in range(40)]
    bundle, _ = osc.build_bundle(make_snapshot(vehicles), {}, now=0.0, config=CONFIG)
    header_cost = len(osc.encode_osc(osc.OscBundle((bundle.elements[0],))))
    element_costs = [4 + len(osc.encode_osc(e)) for e in bundle.elements[1:]]
    limit = header_cost + sum(element_costs[:7])  # room for exactly 7 vehicles
    parts = osc.split_bundle(bundle, limit)
    assert len(parts) == math.ceil(40 / 7)
    assert all(len(part.elements) - 1 <= 7 for part in parts)


def test_unreachable_destination_does_not_raise():
    sender = osc.OscSender(osc.OscConfig(host="203.0.113.1", port=9))  # TEST-NET, blackhole
    bundle, _ = osc.build_bundle(make_snapshot([vehicle()]), {}, now=0.0, config=CONFIG)
    sender.send(bundle)  # fire and forget
    sender.close()


# -- emitter timeline --------------------------------------------------------

def test_emitter_respects_send_interval_and_bounded_silence():
    class CapturingSender:
        def __init__(self):
            self.packets = []

        def send(self, packet):
            self.packets.append(packet)

        def close(self):
            pass

    config = osc.OscConfig(send_interval=0.05, delta_pos=0.5, delta_vel=0.5, keep_alive=2.0)
    sender = CapturingSender()
    emitter = osc.OscEmitter(config, sender=sender)
    rng = random.Random(9)

    sent_times = []
    for k in range(1, 2001):
        now = k * 0.05
        snapshot = make_snapshot([vehicle("a", x=rng.uniform(0, 0.05))], sim_time=now)
        emitted = emitter.maybe_emit(snapshot, [], now)
        if emitted and any(
            isinstance(e, osc.OscMessage) and e.address == osc.VEHICLE_ADDRESS
            for e in sender.packets[-1].elements
        ):
            sent_times.append(now)
    gaps = [b - a for a, b in zip(sent_times, sent_times[1:])]
    assert gaps  # the keep-alive keeps firing even for a nearly static vehicle
    assert max(gaps) <= config.keep_alive + config.send_interval + 1e-9


def test_emitter_sends_remove_notice_once():
    class CapturingSender:
        def __init__(self):
            self.packets = []

        def send(self, packet):
            self.packets.append(packet)

        def close(self):
            pass

    sender = CapturingSender()
    emitter = osc.OscEmitter(CONFIG, sender=sender)
    emitter.maybe_emit(make_snapshot([vehicle("a")]), [], now=0.0)
    emitter.maybe_emit(make_snapshot(), ["a"], now=0.1)
    removes = [
        p for p in sender.packets
        if isinstance(p, osc.OscMessage) and p.address == osc.REMOVE_ADDRESS
    ]
    assert len(removes) == 1
    assert removes[0].args == ("a",)
    assert "a" not in emitter.records
