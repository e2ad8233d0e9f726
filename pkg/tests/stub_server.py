"""Scripted chat-completions server used by the remote-mode tests."""

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer


class Stub:
    """Scripted chat-completions server; ``script`` is a list of (status, text) replies."""

    def __init__(self, script, default=(200, "Answer: C")):
        self.script = list(script)
        self.default = default
        self.requests = []
        self.lock = threading.Lock()
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                body = self.rfile.read(int(self.headers["Content-Length"]))
                with stub.lock:
                    stub.requests.append((self.path, dict(self.headers), json.loads(body)))
                    status, text = stub.script.pop(0) if stub.script else stub.default
                payload = (json.dumps({"choices": [{"message": {"content": text}}]})
                           if status == 200 else text).encode()
                self.send_response(status)
                self.send_header("Content-Length", str(len(payload)))
                self.end_headers()
                self.wfile.write(payload)

            def log_message(self, *args):
                pass

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    @property
    def url(self):
        return f"http://127.0.0.1:{self.server.server_address[1]}/v1"

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()
