"""Sidecar entry point: `serve` runs the provider over stdio or TCP,
`precompute` batch-generates masks and text embeddings."""

from __future__ import annotations

import argparse
import json
import sys

from .backend import FakeBackend
from .batch import precompute
from .server import RequestHandler, serve_stdio, serve_tcp


def _make_backend(args) -> FakeBackend:
    if args.backend != "fake":
        raise SystemExit(f"unknown backend {args.backend!r}; this build "
                         "ships the model-free fake backend only")
    return FakeBackend(seed=args.seed, dim=args.dim)


def cmd_serve(args) -> int:
    handler = RequestHandler(_make_backend(args))
    if args.tcp:
        host, sep, port = args.tcp.rpartition(":")
        if not sep:
            raise SystemExit(f"--tcp needs host:port, got {args.tcp!r}")

        def announce(bound_host, bound_port):
            print(json.dumps({"listening": {"host": bound_host,
                                            "port": bound_port}}),
                  file=sys.stderr, flush=True)

        serve_tcp(handler, host, int(port), announce=announce,
                  max_connections=args.max_connections)
    else:
        serve_stdio(handler, sys.stdin, sys.stdout)
    return 0


def cmd_precompute(args) -> int:
    backend = _make_backend(args)
    summary = precompute(args.frames, args.out_masks, args.vocab,
                         args.out_embeddings, backend,
                         prompt_template=args.prompt_template)
    print(json.dumps(summary, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="perception-sidecar")
    subs = parser.add_subparsers(dest="subcommand", required=True)

    serve = subs.add_parser("serve", help="answer provider requests")
    serve.add_argument("--stdio", action="store_true", default=False,
                       help="serve over stdin/stdout (default)")
    serve.add_argument("--tcp", help="serve over TCP, host:port (port 0 "
                                     "binds an ephemeral port)")
    serve.add_argument("--backend", default="fake")
    serve.add_argument("--seed", type=int, default=0)
    serve.add_argument("--dim", type=int, default=64)
    serve.add_argument("--max-connections", type=int, default=None,
                       help="stop after N TCP connections (testing)")
    serve.set_defaults(func=cmd_serve)

    pre = subs.add_parser("precompute",
                          help="batch-generate masks and text embeddings")
    pre.add_argument("--frames", required=True)
    pre.add_argument("--out-masks", required=True)
    pre.add_argument("--vocab", required=True)
    pre.add_argument("--out-embeddings", required=True)
    pre.add_argument("--backend", default="fake")
    pre.add_argument("--seed", type=int, default=0)
    pre.add_argument("--dim", type=int, default=64)
    pre.add_argument("--prompt-template", default="a photo of {}")
    pre.set_defaults(func=cmd_precompute)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
