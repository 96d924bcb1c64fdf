"""Command line: ``ringserve serve`` and ``ringserve bench``."""

from __future__ import annotations

import argparse
import logging
import sys
from typing import Optional, Sequence

from .config import ConfigError, load_config


def _parse_rates(text: str) -> list[float]:
    try:
        rates = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad rate list {text!r}") from None
    if not rates or any(r <= 0 for r in rates):
        raise argparse.ArgumentTypeError("rates must be positive")
    return rates


def _parse_listen(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    try:
        return host or "127.0.0.1", int(port)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HOST:PORT, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ringserve")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("serve", help="run the HTTP completion server")
    s.add_argument("--config", help="YAML config file")
    s.add_argument("--listen", type=_parse_listen, default=("127.0.0.1", 8000), help="HOST:PORT")
    s.add_argument("--mode", choices=("device", "host"), help="scheduler placement (overrides config)")

    b = sub.add_parser("bench", help="sweep offered loads and write a CSV report")
    b.add_argument("--config", help="YAML config file")
    b.add_argument("--mode", choices=("device", "host"), required=True)
    b.add_argument("--interference-threads", type=int, default=None,
                   help="noisy-neighbour hogs (default from config; 0 disables)")
    b.add_argument("--rates", type=_parse_rates, help="comma-separated req/s, e.g. 1,2,4")
    b.add_argument("--out", default="report.csv")
    return p


def _serve(args) -> int:
    import uvicorn

    from .server import create_app
    from .system import build_system

    cfg = load_config(args.config)
    cfg.transport.mode = "wall"  # a live server runs on real time
    system = build_system(cfg, args.mode)
    system.start()
    host, port = args.listen
    try:
        uvicorn.run(create_app(system), host=host, port=port, log_level="info")
    finally:
        system.stop()
    return 0


def _bench(args) -> int:
    from .harness import run_sweep

    cfg = load_config(args.config)
    if args.interference_threads is not None and args.interference_threads < 0:
        print("error: --interference-threads must be >= 0", file=sys.stderr)
        return 2
    result = run_sweep(cfg, args.mode, args.rates, args.interference_threads, args.out)
    for r in result.reports:
        print(f"rate {r.rate:g}: {r.throughput_rps:.3f} req/s, {r.throughput_tps:.1f} tok/s, "
              f"P99 TTFT {r.ttft.p99 * 1e3:.2f} ms, P99 TPOT {r.tpot.p99 * 1e3:.2f} ms")
    if result.knee is not None:
        print(f"saturation knee: {result.knee:g} req/s")
    print(f"serviceable load: {result.serviceable:g} req/s")
    print(f"wrote {args.out}")
    if result.failures:
        for f in result.failures[:20]:
            print(f"invariant failure: {f}", file=sys.stderr)
        return 1
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return _serve(args) if args.command == "serve" else _bench(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
