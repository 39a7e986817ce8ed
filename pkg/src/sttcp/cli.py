"""Command-line entry point: ``sttcp serve | scenario | soak | shapes``."""

from __future__ import annotations

import argparse
import logging
import random
import sys
from pathlib import Path

from . import harness
from .dsl import render
from .net import BackendError, FaultProfile, raw_backend
from .scenario import ScenarioError, builtin_scenarios, golden_path, run_scenario
from .server import ServerConfig
from .shapes import SYSTEM_NAMES, system_shapes
from .tcp import Address

log = logging.getLogger("sttcp")


def _iss(text: str) -> str:
    if text != "random":
        try:
            int(text, 0)
        except ValueError:
            raise argparse.ArgumentTypeError("--iss takes an integer or 'random'") from None
    return text


def _resolve_iss(text: str, seed: int | None) -> int:
    if text == "random":
        rng = random.Random(seed) if seed is not None else random.SystemRandom()
        return rng.getrandbits(32)
    return int(text, 0) % (1 << 32)


def _profile(args: argparse.Namespace) -> FaultProfile:
    try:
        return FaultProfile(loss=args.loss, dup=args.dup, reorder=args.reorder,
                            delay_ms=args.delay_ms, jitter_ms=args.jitter_ms, seed=args.seed)
    except ValueError as exc:
        raise SystemExit(f"sttcp: {exc}")


def _add_faults(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("simulated link")
    g.add_argument("--loss", type=float, default=0.0, help="drop probability per datagram")
    g.add_argument("--dup", type=float, default=0.0, help="duplication probability")
    g.add_argument("--reorder", type=float, default=0.0, help="reordering probability")
    g.add_argument("--delay-ms", type=float, default=1.0, help="one-way delay")
    g.add_argument("--jitter-ms", type=float, default=0.0, help="uniform extra delay")
    g.add_argument("--seed", type=int, default=0, help="fault generator seed")


def _write(path: str | None, text: str) -> None:
    if path:
        Path(path).write_text(text)


def cmd_serve(args: argparse.Namespace) -> int:
    if args.raw:
        if not args.ip:
            raise SystemExit("sttcp: --raw needs --ip")
        config = ServerConfig(local=Address(args.ip, args.port),
                              iss=_resolve_iss(args.iss, None), rto_ms=args.rto)
        options = {}
        if args.device == "tun":
            options = {"name": args.tun_name, "host_ip": args.tun_host_ip}
        try:
            endpoint = raw_backend(args.ip, device=args.device, **options)
        except BackendError as exc:
            print(f"sttcp: {exc}", file=sys.stderr)
            return 2
        print(f"listening on {config.local} ({args.device})", flush=True)
        try:
            report, _ = harness.serve_live(endpoint, config)
        except KeyboardInterrupt:
            return 130
        finally:
            endpoint.close()
        _write(args.trace, report.text())
        print(report.summary(), end="")
        return 0 if report.ok else 1

    profile = _profile(args)
    config = ServerConfig(local=Address(args.ip or "10.0.0.1", args.port),
                          iss=_resolve_iss(args.iss, args.seed), rto_ms=args.rto)
    rng = random.Random(args.seed)
    result = harness.echo_session(harness.random_lines(rng, args.lines), profile, config)
    _write(args.trace, result.server.text())
    print(result.summary())
    print(result.server.summary(), end="")
    return 0 if result.ok else 1


def cmd_scenario(args: argparse.Namespace) -> int:
    known = builtin_scenarios()
    paths: list[Path] = []
    if args.all or not args.files:
        paths = [known[name] for name in sorted(known)]
    for item in args.files:
        p = Path(item)
        if not p.exists() and item in known:
            p = known[item]
        paths.append(p)
    failed = 0
    for path in paths:
        try:
            result = run_scenario(path)
        except (ScenarioError, OSError) as exc:
            print(f"ERROR {path}: {exc}")
            failed += 1
            continue
        print(result.line())
        if args.trace:
            out = Path(args.trace)
            target = out / f"{result.name}.trace" if out.is_dir() else out
            target.write_text(result.report_text)
        if args.update_golden:
            golden_path(path).write_text(result.report_text)
        elif args.check_golden and golden_path(path).exists():
            if golden_path(path).read_text() != result.report_text:
                print(f"FAIL {result.name}: trace differs from {golden_path(path).name}")
                failed += 1
                continue
        if args.verbose:
            print(result.report_text)
        failed += not result.passed
    return 1 if failed else 0


def cmd_soak(args: argparse.Namespace) -> int:
    profile = _profile(args)
    seeds = args.seeds or [args.seed]
    ok = True
    for seed in seeds:
        p = FaultProfile(**{**profile.__dict__, "seed": seed})
        result = harness.soak(args.lines, p)
        print(f"seed={seed} {result.summary()}")
        ok &= result.ok
    return 0 if ok else 1


def cmd_shapes(args: argparse.Namespace) -> int:
    shapes = system_shapes()
    for name in SYSTEM_NAMES:
        print(f"{name} = {render(shapes[name])}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sttcp", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="serve one echo connection")
    mode = p.add_mutually_exclusive_group(required=True)
    mode.add_argument("--sim", action="store_true", help="simulated link with a built-in client")
    mode.add_argument("--raw", action="store_true", help="live IPv4 through a TUN device or raw socket")
    p.add_argument("--ip", help="server address")
    p.add_argument("--port", type=int, default=7)
    p.add_argument("--iss", type=_iss, default="random", help="initial sequence number or 'random'")
    p.add_argument("--rto", type=float, default=200.0, help="retransmission timeout in ms")
    p.add_argument("--trace", help="write the run report here")
    p.add_argument("--lines", type=int, default=20, help="workload size in --sim mode")
    p.add_argument("--device", choices=("tun", "socket"), default="tun")
    p.add_argument("--tun-name", default="sttcp0")
    p.add_argument("--tun-host-ip", default="10.77.0.1", help="kernel side of the TUN device")
    _add_faults(p)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("scenario", help="run conformance scenarios")
    p.add_argument("files", nargs="*", help="scenario files or built-in names (default: all)")
    p.add_argument("--all", action="store_true")
    p.add_argument("--trace", help="write traces to this file or directory")
    p.add_argument("--check-golden", action="store_true", help="compare with the .trace next to each file")
    p.add_argument("--update-golden", action="store_true")
    p.set_defaults(func=cmd_scenario)

    p = sub.add_parser("soak", help="echo many lines over an impaired link")
    p.add_argument("--lines", type=int, default=200)
    p.add_argument("--seeds", type=int, nargs="*", help="run once per seed")
    _add_faults(p)
    p.set_defaults(func=cmd_soak)

    p = sub.add_parser("shapes", help="print the server session types")
    p.set_defaults(func=cmd_shapes)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
