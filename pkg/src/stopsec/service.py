"""Minimal HTTP front end for :class:`InterferenceDb`.

POST /reports          body {"pseudonym": hex, "channel": str, "timestamp": float[, "location": str]}
GET  /reports?pseudonym=<hex>&channel=<id>[&now=<float>]

The caller's role comes from the ``X-Role`` header.  Responses are JSON.
"""
from __future__ import annotations

import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlparse

from .db import AuthorizationError, InterferenceDb, InterferenceReport
from .frame import parse_pseudonym


def _handler(db: InterferenceDb, clock):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):  # keep stderr quiet
            pass

        def _send(self, code: int, obj):
            body = json.dumps(obj).encode()
            self.send_response(code)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def _role(self):
            return self.headers.get("X-Role", "")

        def do_POST(self):
            if urlparse(self.path).path != "/reports":
                return self._send(404, {"error": "not found"})
            try:
                n = int(self.headers.get("Content-Length", "0"))
                r = InterferenceReport.from_dict(json.loads(self.rfile.read(n) or b"{}"))
                rc = db.write_report(r, self._role())
            except AuthorizationError as e:
                return self._send(403, {"error": str(e)})
            except (ValueError, KeyError, TypeError) as e:
                return self._send(400, {"error": f"bad report: {e}"})
            self._send(200, {"seq": rc.seq, "replaced": rc.replaced, "report": rc.report.to_dict()})

        def do_GET(self):
            u = urlparse(self.path)
            if u.path != "/reports":
                return self._send(404, {"error": "not found"})
            q = {k: v[-1] for k, v in parse_qs(u.query).items()}
            try:
                p = parse_pseudonym(q["pseudonym"])
                now = float(q["now"]) if "now" in q else clock()
                r = db.query_pseudonym(p, q.get("channel", "ch0"), now, self._role())
            except AuthorizationError as e:
                return self._send(403, {"error": str(e)})
            except (ValueError, KeyError) as e:
                return self._send(400, {"error": f"bad query: {e}"})
            self._send(200, {"match": r is not None, "report": r.to_dict() if r else None})

    return Handler


class ReportService:
    """Serve ``db`` on ``host:port`` (port 0 picks a free port) from a daemon thread."""

    def __init__(self, db: InterferenceDb, host="127.0.0.1", port=0, clock=time.time):
        self.db = db
        self.httpd = ThreadingHTTPServer((host, port), _handler(db, clock))
        self.httpd.daemon_threads = True
        self._thread = None

    @property
    def address(self):
        return self.httpd.server_address[:2]

    def start(self):
        self._thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def serve_forever(self):
        self.httpd.serve_forever()

    def stop(self):
        self.httpd.shutdown()
        self.httpd.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
