import pytest

from trafficbridge.mock_server import MockTraciServer
from trafficbridge.scenario import (
    LightProgram,
    Scenario,
    ScenarioVehicle,
    SpeedPhase,
)


def make_vehicle(vid="veh0", vtype="car", depart=0.0, route=((0.0, 0.0), (100.0, 0.0)), speed=10.0):
    phases = (SpeedPhase(0.0, speed),) if isinstance(speed, (int, float)) else tuple(
        SpeedPhase(t, v) for t, v in speed
    )
    return ScenarioVehicle(
        id=vid, vtype=vtype, depart=depart,
        route=tuple(tuple(p) for p in route), speed_phases=phases,
    )


def make_scenario(vehicles=(), lights=(), step_length=0.1):
    return Scenario(step_length=step_length, vehicles=tuple(vehicles), lights=tuple(lights))


TWO_PHASE_PROGRAM = LightProgram("J1", (("GrGr", 5.0), ("rGrG", 5.0)))


@pytest.fixture
def mock_server_factory():
    servers = []

    def start(scenario):
        server = MockTraciServer(scenario).start()
        servers.append(server)
        return server

    yield start
    for server in servers:
        server.stop()


@pytest.fixture
def empty_server(mock_server_factory):
    return mock_server_factory(make_scenario())
