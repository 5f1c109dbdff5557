import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest


class _SilentServer(ThreadingHTTPServer):
    daemon_threads = True

    def handle_error(self, request, client_address):
        # client-side timeouts sever the socket mid-reply; that is expected
        pass


@pytest.fixture
def json_server():
    """Factory for loopback HTTP servers with injected POST behaviour.

    ``start(respond)`` takes a callable ``body_dict -> (status, payload)``
    where payload is a JSON-serializable object or raw bytes, and returns
    the server's base URL.
    """
    servers = []

    def start(respond):
        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length", "0"))
                body = json.loads(self.rfile.read(length) or b"{}")
                status, payload = respond(body)
                data = payload if isinstance(payload, bytes) else json.dumps(payload).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                try:
                    self.wfile.write(data)
                except (BrokenPipeError, ConnectionResetError):
                    pass

            def log_message(self, *args):
                pass

        server = _SilentServer(("127.0.0.1", 0), Handler)
        thread = threading.Thread(target=server.serve_forever, daemon=True)
        thread.start()
        servers.append((server, thread))
        return f"http://127.0.0.1:{server.server_address[1]}/"

    yield start
    for server, thread in servers:
        server.shutdown()
        server.server_close()
        thread.join(timeout=5)


@pytest.fixture
def write_config(tmp_path):
    """Write an experiment config JSON under tmp_path and return its path.

    Defaults describe a small fixture experiment; keyword arguments replace
    top-level keys (pass None to drop a key).
    """

    def _write(name="config.json", **overrides):
        cfg = {
            "out_dir": "out",
            "seed": 7,
            "eval_split": "test",
            "fixture": {"n": 32, "ratios": [0.7, 0.15, 0.15]},
            "image": {"width": 64, "height": 64},
        }
        for key, value in overrides.items():
            if value is None:
                cfg.pop(key, None)
            else:
                cfg[key] = value
        path = tmp_path / name
        path.write_text(json.dumps(cfg, indent=2), encoding="utf-8")
        return path

    return _write
