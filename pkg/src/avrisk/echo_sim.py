"""Reference external simulator: objective := first scenario coordinate.

Reads requests on stdin (or a TCP socket with ``--listen HOST:PORT``) and
answers each with one response line. Fault switches exist to exercise the
pool's retry path::

    python -m avrisk.echo_sim --crash-after 7     # exit abruptly after 7 replies
    python -m avrisk.echo_sim --garble-after 3    # one malformed line after 3 replies
"""
from __future__ import annotations

import argparse
import os
import socketserver
import sys
import time

from avrisk.protocol import EvalResponse, ProtocolError, decode_request, encode_response


def answer(line: str) -> str:
    t0 = time.perf_counter()
    req = decode_request(line)
    value = req.scenario[0] if req.scenario else 0.0
    wall = int((time.perf_counter() - t0) * 1000)
    return encode_response(EvalResponse(req.id, value, wall))


def serve(rfile, wfile, crash_after=None, garble_after=None, delay_ms=0, on_crash=None):
    sent = 0
    garbled = False
    for line in rfile:
        if not line.strip():
            continue
        if crash_after is not None and sent >= crash_after:
            on_crash()
            return
        if garble_after is not None and sent >= garble_after and not garbled:
            garbled = True
            wfile.write('{"id":\n')
            wfile.flush()
            continue
        if delay_ms:
            time.sleep(delay_ms / 1000.0)
        try:
            out = answer(line)
        except ProtocolError as exc:
            print(f"echo_sim: {exc}", file=sys.stderr)
            continue
        wfile.write(out + "\n")
        wfile.flush()
        sent += 1


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--listen", metavar="HOST:PORT")
    ap.add_argument("--crash-after", type=int)
    ap.add_argument("--garble-after", type=int)
    ap.add_argument("--delay-ms", type=int, default=0)
    args = ap.parse_args(argv)
    opts = dict(crash_after=args.crash_after, garble_after=args.garble_after, delay_ms=args.delay_ms)

    if args.listen:
        host, port = args.listen.rsplit(":", 1)

        class Handler(socketserver.StreamRequestHandler):
            def handle(self):
                wfile = _TextWriter(self.wfile)
                rfile = (b.decode("utf-8") for b in self.rfile)
                serve(rfile, wfile, on_crash=lambda: None, **opts)

        with socketserver.ThreadingTCPServer((host, int(port)), Handler) as srv:
            srv.daemon_threads = True
            srv.serve_forever()
        return 0

    serve(sys.stdin, sys.stdout, on_crash=lambda: os._exit(3), **opts)
    return 0


class _TextWriter:
    def __init__(self, raw):
        self.raw = raw

    def write(self, s: str) -> None:
        self.raw.write(s.encode("utf-8"))

    def flush(self) -> None:
        self.raw.flush()


if __name__ == "__main__":
    sys.exit(main())
