"""Command-line interface.

Subcommands:
  run        couple a traffic server to viewers and the OSC audio path
  check-net  parse a network file and report the traffic-light spawn plan
  capture    record a live session to a replay file
  replay     drive the bridge from a capture, no server needed
  mock       serve a scripted scenario over the TraCI protocol
  report     render figures + summary CSV from a stats JSONL
"""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import threading
from pathlib import Path

from . import __version__, runtime
from .config import AppConfig, AppConfigError, dump_config, load_config
from .netparse import NetworkParseError, parse_network, plan_traffic_lights

log = logging.getLogger(__name__)


def _parse_endpoint(value: str) -> tuple[str, int]:
    host, _, port = value.rpartition(":")
    if not host or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected HOST:PORT, got {value!r}")
    return host, int(port)


def _add_config_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="FILE", help="YAML config file")
    parser.add_argument("--traci", metavar="HOST:PORT", type=_parse_endpoint,
                        help="traffic server endpoint")
    parser.add_argument("--net", metavar="FILE", help="road network .net.xml")
    parser.add_argument("--heightfield", metavar="FILE", help="terrain grid file")
    parser.add_argument("--rate", type=float, metavar="N", help="producer rate in Hz")
    parser.add_argument("--radius", type=float, metavar="M", help="culling radius in meters")
    parser.add_argument("--tick-rate", type=float, metavar="HZ", help="consumer tick rate")
    parser.add_argument("--ws-port", type=int, metavar="PORT", help="websocket port")
    parser.add_argument("--no-ws", action="store_true", help="disable the snapshot endpoint")
    parser.add_argument("--osc", metavar="HOST:PORT", type=_parse_endpoint,
                        help="OSC destination")
    parser.add_argument("--no-osc", action="store_true", help="disable OSC output")
    parser.add_argument("--stats", metavar="FILE", help="write stats JSONL here")


def _overrides_from_args(args: argparse.Namespace) -> dict:
    overrides: dict = {}
    if args.traci:
        overrides["traci_host"], overrides["traci_port"] = args.traci
    if args.net:
        overrides["net_file"] = args.net
    if args.heightfield:
        overrides["heightfield_file"] = args.heightfield
    if args.rate:
        overrides.setdefault("bridge", {})["rate_n"] = args.rate
    if args.radius:
        overrides.setdefault("bridge", {})["culling_radius"] = args.radius
    if args.tick_rate:
        overrides["tick_rate"] = args.tick_rate
    if args.ws_port is not None:
        overrides.setdefault("websocket", {})["port"] = args.ws_port
    if args.no_ws:
        overrides.setdefault("websocket", {})["enabled"] = False
    if args.osc:
        osc_host, osc_port = args.osc
        overrides.setdefault("osc", {}).update({"host": osc_host, "port": osc_port})
    if args.no_osc:
        overrides["osc_enabled"] = False
    if args.stats:
        overrides.setdefault("stats", {})["file"] = args.stats
    return overrides


def _load(args: argparse.Namespace) -> AppConfig:
    return load_config(args.config, _overrides_from_args(args))


def _install_stop_handler(stop: threading.Event) -> None:
    def handle(signum, frame):
        log.info("signal %d: shutting down", signum)
        stop.set()

    signal.signal(signal.SIGINT, handle)
    signal.signal(signal.SIGTERM, handle)


def cmd_run(args: argparse.Namespace) -> int:
    try:
        config = _load(args)
        if args.dump_config:
            print(dump_config(config), end="")
            return 0
        stop = threading.Event()
        _install_stop_handler(stop)
        return runtime.run(config, duration=args.duration, stop_event=stop)
    except AppConfigError as exc:
        log.error("%s", exc)
        return 2


def cmd_check_net(args: argparse.Namespace) -> int:
    path = Path(args.net_file)
    if not path.is_file():
        log.error("network file not found: %s", path)
        return 2
    try:
        config = load_config(args.config) if args.config else AppConfig()
    except AppConfigError as exc:
        log.error("%s", exc)
        return 2
    try:
        network = parse_network(path.read_bytes())
        plan = plan_traffic_lights(
            network,
            config.mapper,
            h_offset=args.h_offset,
            flip_facing=args.flip_facing,
        )
    except NetworkParseError as exc:
        log.error("cannot process %s: %s", path, exc)
        return 2
    tl_junctions = sorted(plan.index)
    print(f"lanes:              {len(network.lanes)}")
    print(f"tl connections:     {len(network.tl_connections)}")
    print(f"controlled junctions: {len(tl_junctions)} ({', '.join(tl_junctions[:8])}"
          f"{', ...' if len(tl_junctions) > 8 else ''})")
    print(f"planned signal heads: {len(plan.spawns)}")
    if args.report_dir:
        from . import report

        out = Path(args.report_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / "spawns.csv"
        png_path = out / "network.png"
        report.write_spawn_csv(plan, csv_path)
        report.render_network_figure(network, plan, png_path, mapper=config.mapper)
        print(f"report written: {csv_path}, {png_path}")
    return 0


def cmd_capture(args: argparse.Namespace) -> int:
    try:
        config = _load(args)
        stop = threading.Event()
        _install_stop_handler(stop)
        return runtime.capture_run(config, args.out, args.duration, stop_event=stop)
    except AppConfigError as exc:
        log.error("%s", exc)
        return 2


def cmd_replay(args: argparse.Namespace) -> int:
    try:
        config = _load(args)
        stop = threading.Event()
        _install_stop_handler(stop)
        return runtime.replay_run(
            config, args.capture, speed=args.speed, duration=args.duration, stop_event=stop
        )
    except AppConfigError as exc:
        log.error("%s", exc)
        return 2


def cmd_mock(args: argparse.Namespace) -> int:
    from .mock_server import MockTraciServer
    from .scenario import ScenarioError, load_scenario

    try:
        scenario = load_scenario(args.scenario)
    except (ScenarioError, OSError) as exc:
        log.error("cannot load scenario %s: %s", args.scenario, exc)
        return 2
    server = MockTraciServer(scenario, host=args.host, port=args.port)
    server.start()
    print(json.dumps({"event": "mock-server", "host": args.host, "port": server.port}))
    stop = threading.Event()
    _install_stop_handler(stop)
    try:
        while not stop.wait(0.2):
            pass
    except KeyboardInterrupt:
        pass
    server.stop()
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    from .report import ReportError, write_stats_report

    try:
        written = write_stats_report(args.stats_file, args.out_dir)
    except (ReportError, OSError) as exc:
        log.error("cannot build report: %s", exc)
        return 2
    for path in written:
        print(f"report written: {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--log-level", default="info",
                        choices=["debug", "info", "warning", "error"])

    parser = argparse.ArgumentParser(
        prog="trafficbridge",
        description="Real-time bridge between a TraCI traffic server and 3D/audio clients.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run the bridge against a traffic server", parents=[common])
    _add_config_arguments(p_run)
    p_run.add_argument("--duration", type=float, metavar="SEC",
                       help="stop after this many seconds (default: run until interrupted)")
    p_run.add_argument("--dump-config", action="store_true",
                       help="print the effective configuration and exit")
    p_run.set_defaults(handler=cmd_run)

    p_check = sub.add_parser("check-net", help="parse a network and report the spawn plan", parents=[common])
    p_check.add_argument("net_file", metavar="NET_XML")
    p_check.add_argument("--config", metavar="FILE", help="YAML config (for the mapper)")
    p_check.add_argument("--h-offset", type=float, default=3.0, metavar="M")
    p_check.add_argument("--flip-facing", action="store_true",
                         help="face signal heads back up the approach")
    p_check.add_argument("--report-dir", metavar="DIR",
                         help="write spawns.csv and network.png here")
    p_check.set_defaults(handler=cmd_check_net)

    p_capture = sub.add_parser("capture", help="record a session to a replay file", parents=[common])
    _add_config_arguments(p_capture)
    p_capture.add_argument("--out", required=True, metavar="FILE")
    p_capture.add_argument("--duration", type=float, default=10.0, metavar="SEC")
    p_capture.set_defaults(handler=cmd_capture)

    p_replay = sub.add_parser("replay", help="drive the bridge from a capture file", parents=[common])
    _add_config_arguments(p_replay)
    p_replay.add_argument("capture", metavar="CAPTURE_FILE")
    p_replay.add_argument("--speed", type=float, default=1.0, metavar="X")
    p_replay.add_argument("--duration", type=float, metavar="SEC")
    p_replay.set_defaults(handler=cmd_replay)

    p_mock = sub.add_parser("mock", help="serve a scripted scenario over TraCI", parents=[common])
    p_mock.add_argument("scenario", metavar="SCENARIO_YAML")
    p_mock.add_argument("--host", default="127.0.0.1")
    p_mock.add_argument("--port", type=int, default=8813)
    p_mock.set_defaults(handler=cmd_mock)

    p_report = sub.add_parser("report", help="render figures + CSV from stats JSONL", parents=[common])
    p_report.add_argument("stats_file", metavar="STATS_JSONL")
    p_report.add_argument("--out-dir", default="report", metavar="DIR")
    p_report.set_defaults(handler=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level.upper()),
        format="%(asctime)s %(levelname)-7s %(name)s: %(message)s",
    )
    return args.handler(args)


if __name__ == "__main__":
    sys.exit(main())
