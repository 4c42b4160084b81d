"""Single entry point: broker, daqsim, connector, store, etl, dsp, e2e.

Logs go to standard error, machine-readable output (CSV/JSON) to standard
output. Config precedence is flags > PAVEH_* environment variables >
--config JSON file. Exit codes: 0 ok, 2 usage, 3 runtime failure,
4 data-integrity failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import threading
import time
import urllib.request
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import dsp, etl, tsstore, wire
from .broker import Broker
from .client import BusClient
from .connector import Connector, render_metrics_text
from .daqsim import Scenario, bus_publisher, run_scenario
from .timeutil import format_rfc3339, now_us, parse_duration, parse_rfc3339
from .tsstore import Store, verify_segments

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3
EXIT_INTEGRITY = 4

ENV_PREFIX = "PAVEH_"

KIND_FLAGS = {
    "auto": "auto",
    "asg": etl.ASG,
    "csg": etl.CSG,
    "pc": etl.PC,
    "tc": etl.TC,
    "laser": etl.LASER,
    "laser-pre": etl.LASER_PRETRAFFIC,
    "stationary-et": etl.STATIONARY_ET,
    "stationary-mt": etl.STATIONARY_MT,
    "fwd": etl.FWD,
}


class CliError(Exception):
    exit_code = EXIT_RUNTIME


class IntegrityExit(CliError):
    exit_code = EXIT_INTEGRITY


def _parse_addr(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise CliError(f"address must be host:port, got {text!r}")
    return host, int(port)


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read config {path}: {exc}") from exc


def _resolve(flag_value, name: str, config: dict, default=None):
    """flags > PAVEH_<NAME> env var > config file entry > default."""
    if flag_value is not None:
        return flag_value
    env = os.environ.get(ENV_PREFIX + name.upper().replace("-", "_"))
    if env is not None:
        return env
    if name in config:
        return config[name]
    return default


# --- e2e orchestration -----------------------------------------------------


@dataclass
class PipelineConfig:
    scenario_path: str
    store_root: str
    broker_address: tuple[str, int] = ("127.0.0.1", 0)
    duration_s: int | None = None
    speedup: float = 1.0
    metrics_port: int | None = None


@dataclass
class E2EReport:
    published: int = 0
    stored: int = 0
    accepted: int = 0
    rejected: dict = field(default_factory=dict)
    seq_gaps: int = 0
    duplicate_seq: int = 0
    skew_events: int = 0
    latency_samples: int = 0
    p50_latency_ms: float | None = None
    p99_latency_ms: float | None = None
    max_latency_ms: float | None = None
    duration_s: int = 0
    speedup: float = 1.0
    ok: bool = False

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def human(self) -> str:
        lat = (
            f"p50 {self.p50_latency_ms:.1f} ms, p99 {self.p99_latency_ms:.1f} ms"
            if self.latency_samples
            else "no latency samples"
        )
        return (
            f"published {self.published}, stored {self.stored}, "
            f"seq gaps {self.seq_gaps}, {lat}"
        )


def run_e2e(config: PipelineConfig) -> E2EReport:
    """Run broker + connector + daqsim end to end against one store.

    Latency is measured per sample from the wall-clock publish instant to
    the wall-clock insert completion, joined on (sensor, seq), so it stays
    meaningful at any speedup.
    """
    scenario = Scenario.from_file(config.scenario_path)
    if config.duration_s is not None:
        scenario.duration_s = config.duration_s
    if scenario.start_time_us == 1:
        scenario.start_time_us = now_us()  # align event time with the wall
    report = E2EReport(duration_s=scenario.duration_s, speedup=config.speedup)

    publish_walls: dict[tuple[str, int], int] = {}
    insert_walls: dict[tuple[str, int], int] = {}

    def on_insert(record, wall_us):
        sensor_id = record.sensor_key.rsplit("/", 1)[1]
        insert_walls[(sensor_id, record.seq)] = wall_us

    broker = Broker(*config.broker_address)
    store = Store(config.store_root)
    connector = None
    publisher_client = None
    try:
        broker.start()
        connector = Connector(
            store,
            broker_addr=broker.address,
            metrics_port=config.metrics_port,
            on_insert=on_insert,
        ).start()
        if not connector.wait_ready(timeout=10):
            raise CliError("connector failed to subscribe within 10 s")
        publisher_client = BusClient(*broker.address)
        run_report = run_scenario(
            scenario,
            bus_publisher(publisher_client),
            speedup=config.speedup,
            on_publish=lambda sensor_id, payload, wall: publish_walls.__setitem__(
                (sensor_id, payload.seq), wall
            ),
        )
        report.published = run_report.published
        deadline = time.monotonic() + 30
        while time.monotonic() < deadline:
            if connector.metrics_snapshot().received >= run_report.published:
                break
            time.sleep(0.05)
        connector.drain(timeout=30)
    finally:
        if publisher_client is not None:
            publisher_client.close()
        if connector is not None:
            metrics = connector.metrics_snapshot()
            report.accepted = metrics.accepted
            report.rejected = dict(metrics.rejected)
            report.seq_gaps = metrics.seq_gaps
            report.duplicate_seq = metrics.duplicate_seq
            report.skew_events = metrics.skew_events
            connector.stop()
        broker.stop()
        report.stored = store.count()
        store.close()

    latencies = sorted(
        insert_walls[key] - publish_walls[key]
        for key in publish_walls.keys() & insert_walls.keys()
    )
    report.latency_samples = len(latencies)
    if latencies:
        def pct(q: float) -> float:
            rank = max(0, min(len(latencies) - 1, int(q * len(latencies))))
            return latencies[rank] / 1000.0

        report.p50_latency_ms = pct(0.50)
        report.p99_latency_ms = pct(0.99)
        report.max_latency_ms = latencies[-1] / 1000.0
    report.ok = (
        report.published > 0
        and report.stored == report.accepted
        and report.published == report.accepted + sum(report.rejected.values())
    ) or report.published == 0
    return report


# --- subcommands ------------------------------------------------------------


def cmd_broker_serve(args, config) -> int:
    listen = _resolve(args.listen, "listen", config, "127.0.0.1:4222")
    host, port = _parse_addr(listen)
    broker = Broker(
        host,
        port,
        max_payload=args.max_payload,
        queue_frames=args.queue,
        ping_interval=args.ping_interval,
    ).start()
    logger.info("serving on %s:%d", *broker.address)
    try:
        _wait_for_interrupt()
    finally:
        broker.stop()
    return EXIT_OK


def cmd_daqsim_run(args, config) -> int:
    broker = _resolve(args.broker, "broker", config, "127.0.0.1:4222")
    scenario = Scenario.from_file(args.scenario)
    if args.site:
        scenario.site = args.site
    if args.daq:
        scenario.daq = args.daq
    if args.duration:
        scenario.duration_s = args.duration
    if scenario.start_time_us == 1:
        scenario.start_time_us = now_us()
    client = BusClient(*_parse_addr(broker))
    try:
        report = run_scenario(
            scenario, bus_publisher(client), speedup=args.speedup
        )
    finally:
        client.close()
    logger.info("published %d, failed %d", report.published, report.failed)
    print(json.dumps({"published": report.published, "failed": report.failed}))
    return EXIT_OK


def cmd_connector_run(args, config) -> int:
    broker = _resolve(args.broker, "broker", config, "127.0.0.1:4222")
    store_root = _resolve(args.store, "store", config)
    if store_root is None:
        raise CliError("--store is required (or PAVEH_STORE)")
    store = Store(store_root)
    connector = Connector(
        store,
        broker_addr=_parse_addr(broker),
        wildcard=args.subject,
        metrics_port=args.metrics_port,
    ).start()
    if connector.metrics_port is not None:
        logger.info("metrics on http://127.0.0.1:%d/metrics", connector.metrics_port)
    try:
        _wait_for_interrupt()
    finally:
        connector.stop()
        store.close()
    return EXIT_OK


def cmd_connector_metrics(args, config) -> int:
    body = urllib.request.urlopen(args.endpoint, timeout=10).read().decode()
    if args.format == "csv":
        print("name,value")
        for line in body.strip().splitlines():
            name, _, value = line.partition(" ")
            print(f"{name},{value}")
    else:
        sys.stdout.write(body)
    return EXIT_OK


def cmd_store_query(args, config) -> int:
    store_root = _resolve(args.store, "store", config)
    if store_root is None:
        raise CliError("--store is required (or PAVEH_STORE)")
    t0 = parse_rfc3339(args.time_from)
    t1 = parse_rfc3339(args.time_to)
    if t0 > t1:
        raise UsageError("--from must not be after --to")
    with Store(store_root) as store:
        print("ts_rfc3339,value")
        if args.bucket:
            bucket = parse_duration(args.bucket)
            for start, value in store.downsample(args.sensor, t0, t1, bucket, args.agg):
                print(f"{format_rfc3339(start)},{value}")
        else:
            for sample in store.query_range(args.sensor, t0, t1):
                print(f"{format_rfc3339(sample.ts)},{sample.v}")
    return EXIT_OK


def cmd_store_check(args, config) -> int:
    store_root = _resolve(args.store, "store", config)
    if store_root is None:
        raise CliError("--store is required (or PAVEH_STORE)")
    issues = verify_segments(store_root)
    for issue in issues:
        print(f"{issue.path}: {issue.problem}", file=sys.stderr)
    if issues:
        raise IntegrityExit(f"{len(issues)} segment issue(s)")
    logger.info("store is clean")
    return EXIT_OK


def cmd_etl_process(args, config) -> int:
    in_dir = Path(args.input)
    out_dir = Path(args.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    kind = KIND_FLAGS[args.kind]
    paths = sorted(p for p in in_dir.iterdir() if p.is_file())
    if not paths:
        raise CliError(f"no input files in {in_dir}")
    data_rows: list[etl.DataRow] = []
    laser_rows: list[etl.LaserRow] = []
    metas: list[etl.FileMeta] = []
    for path in paths:
        result = etl.process_file(path, kind)
        metas.append(result.meta)
        data_rows.extend(result.data_rows)
        laser_rows.extend(result.laser_rows)
        for warning in result.warnings:
            logger.warning("%s: %s", path.name, warning)
    file_info = etl.build_file_info(metas)
    wrote = []
    if data_rows or not laser_rows:
        data_csv, info_csv = etl.emit_normalized(data_rows, file_info)
        (out_dir / "data.csv").write_text(data_csv)
        wrote.append("data.csv")
    if laser_rows:
        laser_csv, info_csv = etl.emit_laser_normalized(laser_rows, file_info)
        (out_dir / "laser.csv").write_text(laser_csv)
        wrote.append("laser.csv")
    (out_dir / "file_info.csv").write_text(info_csv)
    wrote.append("file_info.csv")
    logger.info(
        "%d file(s) -> %d data rows, %d laser rows (%s)",
        len(paths), len(data_rows), len(laser_rows), ", ".join(wrote),
    )
    return EXIT_OK


def cmd_etl_join(args, config) -> int:
    joined = etl.join_by_filename_id(
        Path(args.data).read_text(), Path(args.fileinfo).read_text()
    )
    if args.output:
        Path(args.output).write_text(joined)
    else:
        sys.stdout.write(joined)
    return EXIT_OK


def cmd_dsp_inspect(args, config) -> int:
    rows = [
        line.split(",")
        for line in Path(args.input).read_text().strip().splitlines()
    ]
    start = 1 if rows and not _is_number(rows[0][0]) else 0
    t = np.array([float(r[0]) for r in rows[start:]])
    y = np.array([float(r[1]) for r in rows[start:]])
    series = dsp.Series(t=t, y=y)
    smoothed = dsp.smooth(
        series, dsp.DspConfig(window=args.window, polyorder=args.order)
    )
    print("t,y,y_smoothed")
    for ti, yi, si in zip(t, y, smoothed.y):
        print(f"{ti},{yi},{si}")
    return EXIT_OK


def cmd_e2e_run(args, config) -> int:
    broker = _resolve(args.broker, "broker", config, "127.0.0.1:0")
    store_root = _resolve(args.store, "store", config)
    if store_root is None:
        raise CliError("--store is required (or PAVEH_STORE)")
    pipeline = PipelineConfig(
        scenario_path=args.scenario,
        store_root=store_root,
        broker_address=_parse_addr(broker),
        duration_s=args.duration,
        speedup=args.speedup,
        metrics_port=args.metrics_port,
    )
    try:
        report = run_e2e(pipeline)
    except Exception as exc:
        partial = E2EReport(ok=False)
        print(partial.to_json())
        raise CliError(f"pipeline failed: {exc}") from exc
    print(report.to_json())
    logger.info("%s", report.human())
    return EXIT_OK if report.ok else EXIT_RUNTIME


def _is_number(text: str) -> bool:
    try:
        float(text)
        return True
    except ValueError:
        return False


def _wait_for_interrupt() -> None:
    stop = threading.Event()

    def handler(signum, frame):
        stop.set()

    signal.signal(signal.SIGINT, handler)
    signal.signal(signal.SIGTERM, handler)
    while not stop.is_set():
        stop.wait(0.5)


class UsageError(Exception):
    """Validation failure that should exit like a bad flag (code 2)."""


# --- argument plumbing ---------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="paveharvest",
        description="Pavement sensor data harvesting toolkit",
    )
    parser.add_argument("--config", help="JSON config file (lowest precedence)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("broker", help="subject bus")
    bsub = p.add_subparsers(dest="subcommand", required=True)
    serve = bsub.add_parser("serve", help="run the broker")
    serve.add_argument("--listen", help="host:port (default 127.0.0.1:4222)")
    serve.add_argument("--max-payload", type=int, default=wire.MAX_PAYLOAD)
    serve.add_argument("--queue", type=int, default=8192)
    serve.add_argument("--ping-interval", type=float, default=30.0)
    serve.set_defaults(func=cmd_broker_serve)

    p = sub.add_parser("daqsim", help="DAQ simulator")
    dsub = p.add_subparsers(dest="subcommand", required=True)
    drun = dsub.add_parser("run", help="publish a scenario")
    drun.add_argument("--broker", help="broker host:port")
    drun.add_argument("--scenario", required=True)
    drun.add_argument("--site")
    drun.add_argument("--daq")
    drun.add_argument("--speedup", type=float, default=1.0)
    drun.add_argument("--duration", type=int)
    drun.set_defaults(func=cmd_daqsim_run)

    p = sub.add_parser("connector", help="bus-to-store connector")
    csub = p.add_subparsers(dest="subcommand", required=True)
    crun = csub.add_parser("run", help="consume and store")
    crun.add_argument("--broker", help="broker host:port")
    crun.add_argument("--store", help="store root directory")
    crun.add_argument("--subject", default="site.>")
    crun.add_argument("--metrics-port", type=int)
    crun.set_defaults(func=cmd_connector_run)
    cmet = csub.add_parser("metrics", help="fetch metrics from a connector")
    cmet.add_argument("--endpoint", required=True, help="http://host:port/metrics")
    cmet.add_argument("--format", choices=("text", "csv"), default="text")
    cmet.set_defaults(func=cmd_connector_metrics)

    p = sub.add_parser("store", help="time-series store")
    ssub = p.add_subparsers(dest="subcommand", required=True)
    q = ssub.add_parser("query", help="range query / downsample as CSV")
    q.add_argument("--store", help="store root directory")
    q.add_argument("--sensor", required=True)
    q.add_argument("--from", dest="time_from", required=True, metavar="RFC3339")
    q.add_argument("--to", dest="time_to", required=True, metavar="RFC3339")
    q.add_argument("--bucket", help="downsample bucket, e.g. 5m")
    q.add_argument("--agg", choices=tsstore.AGGREGATES, default="avg")
    q.add_argument("--format", choices=("csv",), default="csv")
    q.set_defaults(func=cmd_store_query)
    chk = ssub.add_parser("check", help="verify segment files")
    chk.add_argument("--store", help="store root directory")
    chk.set_defaults(func=cmd_store_check)

    p = sub.add_parser("etl", help="static-path processing")
    esub = p.add_subparsers(dest="subcommand", required=True)
    eproc = esub.add_parser("process", help="raw logs to normalized CSV")
    eproc.add_argument("--in", dest="input", required=True)
    eproc.add_argument("--kind", choices=sorted(KIND_FLAGS), default="auto")
    eproc.add_argument("--out", dest="output", required=True)
    eproc.set_defaults(func=cmd_etl_process)
    ejoin = esub.add_parser("join", help="denormalize by filename_id")
    ejoin.add_argument("--data", required=True)
    ejoin.add_argument("--fileinfo", required=True)
    ejoin.add_argument("--out", dest="output")
    ejoin.set_defaults(func=cmd_etl_join)

    p = sub.add_parser("dsp", help="signal-processing utilities")
    psub = p.add_subparsers(dest="subcommand", required=True)
    insp = psub.add_parser("inspect", help="smooth a t,y CSV")
    insp.add_argument("--in", dest="input", required=True)
    insp.add_argument("--window", type=int, required=True)
    insp.add_argument("--order", type=int, default=2)
    insp.set_defaults(func=cmd_dsp_inspect)

    p = sub.add_parser("e2e", help="full pipeline run")
    xsub = p.add_subparsers(dest="subcommand", required=True)
    xrun = xsub.add_parser("run", help="broker + connector + daqsim")
    xrun.add_argument("--scenario", required=True)
    xrun.add_argument("--store", help="store root directory")
    xrun.add_argument("--broker", help="listen host:port (default ephemeral)")
    xrun.add_argument("--duration", type=int)
    xrun.add_argument("--speedup", type=float, default=1.0)
    xrun.add_argument("--metrics-port", type=int)
    xrun.set_defaults(func=cmd_e2e_run)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    config = _load_config(args.config)
    try:
        return args.func(args, config)
    except UsageError as exc:
        parser.error(str(exc))  # exits 2
        return EXIT_USAGE  # unreachable
    except (etl.DanglingReference, etl.IntegrityError, tsstore.CorruptSegment) as exc:
        logger.error("data integrity: %s", exc)
        return EXIT_INTEGRITY
    except IntegrityExit as exc:
        logger.error("%s", exc)
        return EXIT_INTEGRITY
    except CliError as exc:
        logger.error("%s", exc)
        return exc.exit_code
    except (
        etl.EtlError,
        wire.WireError,
        tsstore.StoreError,
        dsp.DspError,
        OSError,
        ValueError,
    ) as exc:
        logger.error("%s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
