"""Command line entry point.

Exit codes: 0 success, 2 configuration problem, 3 transport problem,
4 protocol violation.
"""

from __future__ import annotations

import argparse
import sys

from . import app
from .channel import ChannelClosed
from .core import ContractViolation
from .wire import DecodeError, ProtocolError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_TRANSPORT = 3
EXIT_PROTOCOL = 4


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="session INI file")
    p.add_argument("--seed", type=int, default=None,
                   help="override the session seed")
    p.add_argument("--duration", type=float, default=None,
                   help="override the simulated duration in seconds")
    p.add_argument("--keys", default=None,
                   help="override this station's key file path")
    p.add_argument("--metrics", default=None,
                   help="override this station's metrics CSV path")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="entkd",
        description="Entangled-photon key distribution: timestamp link "
                    "simulator and two-station post-processing stack.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("loopback",
                       help="run both stations in one process")
    _add_common(p)

    p = sub.add_parser("alice",
                       help="run the matcher station as a TCP server")
    _add_common(p)
    p.add_argument("--peer", default="127.0.0.1:7170",
                   help="host:port to listen on")

    p = sub.add_parser("bob",
                       help="run the streamer station as a TCP client")
    _add_common(p)
    p.add_argument("--peer", default="127.0.0.1:7170",
                   help="host:port of the matcher station")

    p = sub.add_parser("dump-streams",
                       help="simulate the link once and record both streams")
    p.add_argument("--config", required=True, help="session INI file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--duration", type=float, default=None)
    p.add_argument("--out-alice", default="alice.etkd")
    p.add_argument("--out-bob", default="bob.etkd")
    return parser


def _load(args) -> app.SessionConfig:
    cfg = app.load_config(args.config, seed=args.seed,
                          duration=args.duration)
    if getattr(args, "keys", None):
        if args.command == "bob":
            cfg.keys_bob = args.keys
        else:
            cfg.keys_alice = args.keys
    if getattr(args, "metrics", None):
        if args.command == "bob":
            cfg.metrics_bob = args.metrics
        else:
            cfg.metrics_alice = args.metrics
    return cfg


def _summary(outcome) -> str:
    return (f"{outcome.role}: epochs={outcome.epochs} "
            f"sifted={outcome.sifted_bits} secret={outcome.secret_bits} "
            f"clusters ok/discarded/mismatched="
            f"{outcome.clusters_ok}/{outcome.clusters_discarded}/"
            f"{outcome.clusters_mismatched} qber={outcome.qber_last:.4f}")


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "loopback":
            cfg = _load(args)
            out_m, out_s = app.run_loopback(cfg)
            print(_summary(out_m))
            print(_summary(out_s))
        elif args.command == "alice":
            cfg = _load(args)
            out = app.run_matcher_tcp(cfg, args.peer)
            print(_summary(out))
        elif args.command == "bob":
            cfg = _load(args)
            out = app.run_streamer_tcp(cfg, args.peer)
            print(_summary(out))
        elif args.command == "dump-streams":
            cfg = app.load_config(args.config, seed=args.seed,
                                  duration=args.duration)
            n_a, n_b = app.dump_streams(cfg, args.out_alice, args.out_bob)
            print(f"wrote {n_a} events to {args.out_alice}, "
                  f"{n_b} events to {args.out_bob}")
    except app.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ChannelClosed, ConnectionError, OSError, TimeoutError) as exc:
        print(f"transport error: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except (ProtocolError, DecodeError, ContractViolation) as exc:
        print(f"protocol error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
