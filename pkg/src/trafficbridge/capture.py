"""Recording and replaying producer publications.

A capture is line-delimited JSON: a header line, then one line per batch.

    {"format": "traffic-capture/1", "step_length": 0.1, "tl_ids": ["J1"]}
    {"sim_time": 0.1, "vehicles": {"veh0": {"x":.., "y":.., "angle":..,
     "speed":.., "accel":.., "vtype":"car"}}, "lights": {"J1": "GrGr"},
     "departed": ["veh0"], "arrived": []}

Replay feeds the recorded batches through the same shared state the live
producer would use, paced by the recorded step length, so the whole consumer
side runs without any server.
"""

from __future__ import annotations

import json
import threading
import time
from pathlib import Path

from .bridge import SharedTrafficState, UpdateBatch
from .traci_client import VehicleState

CAPTURE_FORMAT = "traffic-capture/1"


class CaptureError(Exception):
    pass


def batch_to_doc(batch: UpdateBatch) -> dict:
    return {
        "sim_time": batch.sim_time,
        "vehicles": {
            vid: {
                "x": s.position[0],
                "y": s.position[1],
                "angle": s.angle,
                "speed": s.speed,
                "accel": s.acceleration,
                "vtype": s.vtype,
            }
            for vid, s in batch.vehicles.items()
        },
        "lights": dict(batch.lights),
        "departed": list(batch.departed),
        "arrived": list(batch.arrived),
        "step_lag": batch.step_lag,
    }


def batch_from_doc(doc: dict) -> UpdateBatch:
    sim_time = float(doc["sim_time"])
    vehicles = {
        vid: VehicleState(
            id=vid,
            position=(float(v["x"]), float(v["y"])),
            angle=float(v["angle"]),
            speed=float(v["speed"]),
            acceleration=float(v.get("accel", 0.0)),
            vtype=str(v.get("vtype", "car")),
            sim_time=sim_time,
        )
        for vid, v in doc.get("vehicles", {}).items()
    }
    return UpdateBatch(
        sim_time=sim_time,
        vehicles=vehicles,
        lights={str(k): str(v) for k, v in doc.get("lights", {}).items()},
        departed=tuple(doc.get("departed", [])),
        arrived=tuple(doc.get("arrived", [])),
        step_lag=float(doc.get("step_lag", 0.0)),
    )


class CaptureWriter:
    def __init__(self, path: str | Path, step_length: float, tl_ids=()):
        self._fh = open(path, "w", encoding="utf-8")
        header = {
            "format": CAPTURE_FORMAT,
            "step_length": step_length,
            "tl_ids": list(tl_ids),
        }
        self._fh.write(json.dumps(header) + "\n")
        self.batches = 0

    def write(self, batch: UpdateBatch) -> None:
        self._fh.write(json.dumps(batch_to_doc(batch), separators=(",", ":")) + "\n")
        self.batches += 1

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_capture(path: str | Path) -> tuple[dict, list[UpdateBatch]]:
    with open(path, "r", encoding="utf-8") as fh:
        header_line = fh.readline()
        if not header_line:
            raise CaptureError(f"{path}: empty capture file")
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as exc:
            raise CaptureError(f"{path}: bad header line: {exc}") from None
        if header.get("format") != CAPTURE_FORMAT:
            raise CaptureError(
                f"{path}: unsupported capture format {header.get('format')!r}"
            )
        batches = []
        for line_no, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                batches.append(batch_from_doc(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise CaptureError(f"{path}:{line_no}: bad batch record: {exc}") from None
    return header, batches


def replay_publisher(
    batches: list[UpdateBatch],
    shared: SharedTrafficState,
    step_length: float,
    stop: threading.Event,
    speed: float = 1.0,
    clock=time.monotonic,
) -> None:
    """Publish recorded batches at the recorded cadence (scaled by speed)."""
    if speed <= 0:
        raise ValueError("speed must be positive")
    period = step_length / speed
    next_time = clock()
    for batch in batches:
        if stop.is_set():
            return
        shared.publish(batch)
        next_time += period
        delay = next_time - clock()
        if delay > 0:
            stop.wait(delay)
        else:
            next_time = clock()
