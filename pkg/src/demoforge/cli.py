"""Operator CLI: serve the platform, inspect the catalog, validate/replay/
export recorded episodes, and drive a scripted headless client.

Exit codes: 0 success, 1 data or validation failure, 2 usage/config/
environment failure.
"""

import argparse
import asyncio
import logging
import math
import signal
import socket
import sys
from pathlib import Path

from .configtext import ConfigError

EXIT_OK = 0
EXIT_DATA = 1
EXIT_USAGE = 2


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="demoforge",
        description="Deterministic robot teleoperation demo collection.")
    parser.add_argument("--data-dir", help="storage root (DEMOFORGE_DATA_DIR)")
    parser.add_argument("--config", help="config file (same format as scene specs)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="run the service until signaled")
    p.add_argument("--bind", help="host:port (DEMOFORGE_BIND); port 0 picks a free port")
    p.add_argument("--max-sessions", type=int)
    p.add_argument("--media-cap-bytes", type=int)

    sub.add_parser("scenes", help="list the scene/robot catalog")

    p = sub.add_parser("validate", help="validate episode directories")
    p.add_argument("paths", nargs="+")

    p = sub.add_parser("replay", help="re-simulate an episode")
    p.add_argument("path")
    p.add_argument("--check", action="store_true",
                   help="byte-compare against the stored frame log")

    p = sub.add_parser("export", help="export an aligned dataset bundle")
    p.add_argument("--out", required=True)
    p.add_argument("--scene")
    p.add_argument("--robot")
    p.add_argument("--label")
    p.add_argument("--include-unfinalized", action="store_true")
    p.add_argument("--plots", action="store_true",
                   help="render a trajectory figure per episode")

    p = sub.add_parser("script-client",
                       help="drive a session from a command schedule file")
    p.add_argument("--server", required=True, help="e.g. http://127.0.0.1:8080")
    p.add_argument("--session", help="attach to an existing session id")
    p.add_argument("--scene", help="create a session for this scene")
    p.add_argument("--robot", help="robot for the created session")
    p.add_argument("--script", help="schedule file; omit for a zero-action episode")
    p.add_argument("--label", default="scripted")
    p.add_argument("--contributor", default="script")
    p.add_argument("--lead", type=int, default=30,
                   help="ticks between connect and the first scheduled command")
    p.add_argument("--tail", type=int, default=60,
                   help="ticks between the last command and record stop")
    p.add_argument("--latency-probes", type=int, default=0,
                   help="measure loopback latency instead of recording")
    p.add_argument("--report-dir",
                   help="write latency samples and a histogram figure here")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        handler = {
            "serve": cmd_serve,
            "scenes": cmd_scenes,
            "validate": cmd_validate,
            "replay": cmd_replay,
            "export": cmd_export,
            "script-client": cmd_script_client,
        }[args.command]
        return handler(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        return EXIT_OK


def _resolve(args, **overrides):
    from .service.config import resolve_config
    return resolve_config(config_path=args.config, data_dir=args.data_dir, **overrides)


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app
    from .service.config import resolve_config

    logging.basicConfig(level=logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        config = resolve_config(config_path=args.config, data_dir=args.data_dir,
                                bind=args.bind, max_sessions=args.max_sessions,
                                media_cap_bytes=args.media_cap_bytes)
    except (ValueError, OSError) as e:
        print(f"bad config: {e}", file=sys.stderr)
        return EXIT_USAGE

    try:
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        sock.bind((config.host, config.port))
        sock.listen(128)
    except OSError as e:
        print(f"cannot bind {config.host}:{config.port}: {e}", file=sys.stderr)
        return EXIT_USAGE
    host, port = sock.getsockname()[:2]

    app = create_app(config)
    server = uvicorn.Server(uvicorn.Config(app, log_level="warning",
                                           timeout_graceful_shutdown=5))
    print(f"demoforge: listening on http://{host}:{port} data_dir={config.data_dir}",
          flush=True)

    async def _serve():
        loop = asyncio.get_running_loop()
        for sig in (signal.SIGINT, signal.SIGTERM):
            loop.add_signal_handler(sig, server.handle_exit, sig, None)
        await server.serve(sockets=[sock])

    asyncio.run(_serve())
    return EXIT_OK


def cmd_scenes(args) -> int:
    from .catalog import load_catalog

    config = _resolve(args)
    catalog = load_catalog(config.data_dir)
    for name in sorted(catalog.scenes):
        entry = catalog.scenes[name]
        prompt = entry.spec.task_prompt or ""
        print(f"scene {name} robot={entry.spec.robot} "
              f"objects={len(entry.spec.objects)} digest={entry.digest[:12]} {prompt}")
    for name in sorted(catalog.robots):
        entry = catalog.robots[name]
        print(f"robot {name} joints={entry.model.n} digest={entry.digest[:12]}")
    return EXIT_OK


def cmd_validate(args) -> int:
    from .store import validate_episode

    all_ok = True
    for path in args.paths:
        report = validate_episode(path)
        for line in report.lines():
            print(line)
        all_ok = all_ok and report.ok
    return EXIT_OK if all_ok else EXIT_DATA


def cmd_replay(args) -> int:
    from .catalog import load_catalog
    from .store import DigestMismatch, StoreError, replay_check, replay_episode

    config = _resolve(args)
    registry = load_catalog(config.data_dir)
    try:
        if args.check:
            result = replay_check(args.path, registry)
            if result.equal:
                print(f"replay ok: {result.frames_checked} frames match {args.path}")
                return EXIT_OK
            print(f"replay DIVERGED at tick {result.first_divergent_tick}: "
                  f"{result.detail}", file=sys.stderr)
            return EXIT_DATA
        count = 0
        for _, line in replay_episode(args.path, registry):
            print(line)
            count += 1
        print(f"replayed {count} frames", file=sys.stderr)
        return EXIT_OK
    except DigestMismatch as e:
        print(f"digest mismatch: {e}", file=sys.stderr)
        return EXIT_DATA
    except StoreError as e:
        print(f"replay failed: {e}", file=sys.stderr)
        return EXIT_DATA


def cmd_export(args) -> int:
    from .store import EpisodeStore, export_dataset

    config = _resolve(args)
    store = EpisodeStore(config.data_dir)
    result = export_dataset(store, args.out, scene=args.scene, robot=args.robot,
                            label=args.label,
                            finalized_only=not args.include_unfinalized,
                            plots=args.plots)
    if result.warning:
        print(f"warning: {result.warning}", file=sys.stderr)
    print(f"exported {len(result.episode_ids)} episodes to {result.out_dir}")
    for eid in result.episode_ids:
        print(f"  {eid}")
    return EXIT_OK


def _percentile(sorted_samples, fraction: float) -> float:
    if not sorted_samples:
        return math.nan
    idx = max(0, math.ceil(fraction * len(sorted_samples)) - 1)
    return sorted_samples[idx]


def cmd_script_client(args) -> int:
    from .client import ClientError, SessionClient, create_session, parse_script_file

    try:
        if args.session:
            session_id = args.session
        elif args.scene and args.robot:
            session_id = create_session(args.server, args.scene, args.robot)["session_id"]
        else:
            print("need --session or both --scene and --robot", file=sys.stderr)
            return EXIT_USAGE
        rows = parse_script_file(args.script) if args.script else []
    except ConfigError as e:
        print(f"bad script: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ClientError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE

    try:
        client = SessionClient(args.server, session_id, contributor=args.contributor)
    except Exception as e:
        print(f"cannot connect: {e}", file=sys.stderr)
        return EXIT_USAGE

    try:
        if args.latency_probes > 0:
            samples = client.measure_latency(probes=args.latency_probes)
            ordered = sorted(samples)
            p50 = _percentile(ordered, 0.50)
            p95 = _percentile(ordered, 0.95)
            print(f"latency: n={len(samples)} p50={p50 * 1000:.1f}ms "
                  f"p95={p95 * 1000:.1f}ms")
            if args.report_dir:
                out = Path(args.report_dir)
                out.mkdir(parents=True, exist_ok=True)
                with open(out / "latency.log", "w", encoding="utf-8") as f:
                    for s in samples:
                        f.write(f"{s:.6f}\n")
                from .plots import render_latency_figure
                render_latency_figure(samples, out / "latency.png", p50, p95)
                print(f"report written to {out}")
            return EXIT_OK

        episode_id = client.run_script(rows, label=args.label,
                                       lead=args.lead, tail=args.tail)
        print(episode_id)
        return EXIT_OK
    except ClientError as e:
        print(str(e), file=sys.stderr)
        return EXIT_DATA
    finally:
        client.close()


if __name__ == "__main__":
    sys.exit(main())
