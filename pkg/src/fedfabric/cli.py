"""Command-line entry points.

    fedfabric relay --config run.json
    fedfabric store <store_id> --config run.json
    fedfabric endpoint <endpoint_id> --config run.json --out runs/x
    fedfabric thinker <app> --config run.json --out runs/x
    fedfabric bench <scenario> [--config overrides.json] --out runs/x
    fedfabric report runs/x
"""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import threading
from pathlib import Path

from .config import THINKER_SITE, RunConfig
from .errors import AuthError, FabricError

log = logging.getLogger("fedfabric")


def _wait_for_signal() -> None:
    done = threading.Event()
    for sig in (signal.SIGTERM, signal.SIGINT):
        signal.signal(sig, lambda *_: done.set())
    while not done.wait(0.5):
        pass


def cmd_relay(args) -> int:
    from .relay.server import RelayServer

    cfg = RunConfig.load(args.config)
    server = RelayServer(cfg.relay)
    server.start()
    log.info("relay listening on %s", server.address)
    _wait_for_signal()
    server.stop()
    return 0


def cmd_store(args) -> int:
    from .stores import build_backend
    from .stores.server import StoreServer

    cfg = RunConfig.load(args.config)
    sc = cfg.stores[args.role_id]
    server = StoreServer(build_backend(sc), sc.host, sc.port)
    server.start()
    log.info("store %s (%s) listening on %s", sc.store_id, sc.kind.value, server.address)
    _wait_for_signal()
    server.stop()
    return 0


def cmd_endpoint(args) -> int:
    from .endpoint import endpoint_events, run_endpoint

    cfg = RunConfig.load(args.config)
    spec = cfg.endpoint_spec(args.role_id)
    events = endpoint_events(args.out, args.role_id)
    try:
        ep = run_endpoint(spec, f"{cfg.relay.host}:{cfg.relay.port}", events, clock_dir=args.out)
    except AuthError as exc:
        log.error("endpoint %s rejected by the relay: %s", args.role_id, exc)
        return 3
    finally:
        events.close()
    log.info("endpoint %s stopped after %d tasks", args.role_id, ep.executed)
    return 0


def cmd_thinker(args) -> int:
    from .bench.events import EventLog
    from .bench.scenarios import run_thinker_app
    from .relay.server import RelayClient
    from .steering import TaskServer
    from .stores import StoreRegistry, connect

    cfg = RunConfig.load(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    address = f"{cfg.relay.host}:{cfg.relay.port}"
    client = RelayClient(address)
    est = client.clock_offset()
    client.close()
    (out / "clock-thinker.json").write_text(json.dumps({"role": "thinker", **est}))
    registry = StoreRegistry({sid: connect(sc) for sid, sc in cfg.site_stores(THINKER_SITE).items()})
    events = EventLog(out / "events-thinker.jsonl")

    def factory(topics):
        return TaskServer(address, topics, cfg.proxy, registry, events, client_id="thinker").start()

    state, ts = run_thinker_app(cfg, args.role_id, factory)
    ts.close()
    events.close()
    (out / f"{args.role_id}.json").write_text(json.dumps(state.summary(), indent=2, default=str))
    print(json.dumps({k: v for k, v in state.summary().items() if not isinstance(v, (list, dict))}, default=str))
    return 0


def cmd_bench(args) -> int:
    from .bench.scenarios import run_scenario

    overrides = json.loads(Path(args.config).read_text()) if args.config else None
    metrics = run_scenario(args.scenario, overrides, args.out)
    print((Path(args.out) / "summary.txt").read_text(), end="")
    return 0 if metrics["passed"] else 1


def cmd_report(args) -> int:
    from .bench.report import report_dir

    print(report_dir(args.run_dir), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedfabric", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def role(name, fn, id_name=None, help_=""):
        sp = sub.add_parser(name, help=help_)
        if id_name:
            sp.add_argument("role_id", metavar=id_name)
        sp.add_argument("--config", required=True, help="run configuration (JSON)")
        sp.add_argument("--out", default=".", help="directory for events and clock files")
        sp.set_defaults(fn=fn)
        return sp

    role("relay", cmd_relay, help_="run the task relay")
    role("store", cmd_store, "store_id", "serve one configured store")
    role("endpoint", cmd_endpoint, "endpoint_id", "run an endpoint and its worker pool")
    role("thinker", cmd_thinker, "app", "run an application thinker (moldesign or finetune)")

    sp = sub.add_parser("bench", help="run a benchmark scenario end to end")
    sp.add_argument("scenario")
    sp.add_argument("--config", help="JSON overrides merged onto the scenario defaults")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_bench)

    sp = sub.add_parser("report", help="re-emit summary.csv and summary.txt for a finished run")
    sp.add_argument("run_dir")
    sp.set_defaults(fn=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.fn(args)
    except (FabricError, KeyError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
