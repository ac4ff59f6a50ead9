"""Stateless HTTP serve path for ad-hoc embeddings.

POST /embed with ``{"texts": [...], "kind": "dense"|"token"}`` returns
``{"dim": d, "kind": k, "normalized": bool, "records": [...]}`` where
each record is the base64 of one interchange-layout record with a
synthetic id ``t<i>``. The requested kind must match the kind the
server was configured for; anything else is a 400. The handler holds a
single shared read-only encoder, so concurrent requests are safe.
"""

from __future__ import annotations

import base64
import json
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from .config import KINDS, ProviderConfig, ProviderError
from .encoder import load_encoder
from .records import DENSE_KIND, TOKEN_KIND, encode_record


class BadRequest(Exception):
    pass


def _embed_payload(encoder, cfg: ProviderConfig, body: bytes) -> dict:
    try:
        request = json.loads(body)
    except json.JSONDecodeError as exc:
        raise BadRequest(f"invalid JSON body: {exc.msg}")
    if not isinstance(request, dict):
        raise BadRequest("request body must be a JSON object")
    texts = request.get("texts")
    if not isinstance(texts, list) or not all(isinstance(t, str) for t in texts):
        raise BadRequest("'texts' must be a list of strings")
    kind = request.get("kind", cfg.kind)
    if kind not in KINDS:
        raise BadRequest(f"'kind' must be one of {KINDS}")
    if kind != cfg.kind:
        raise BadRequest(f"server is loaded for kind {cfg.kind!r}, not {kind!r}")

    records = []
    for i, text in enumerate(texts):
        input_id = f"t{i}"
        try:
            if kind == "dense":
                rows = encoder.encode_dense(input_id, text, cfg).reshape(1, -1)
            else:
                rows = encoder.encode_tokens(input_id, text, cfg.max_seq_len)
                if cfg.normalize:
                    norms = np.linalg.norm(rows.astype(np.float64), axis=1, keepdims=True)
                    rows = (rows / norms).astype(np.float32)
        except ProviderError as exc:
            raise BadRequest(str(exc))
        records.append(base64.b64encode(encode_record(input_id, rows)).decode("ascii"))
    return {
        "dim": encoder.dim,
        "kind": DENSE_KIND if kind == "dense" else TOKEN_KIND,
        "normalized": cfg.normalize,
        "records": records,
    }


def make_server(cfg: ProviderConfig, port: int) -> ThreadingHTTPServer:
    encoder = load_encoder(cfg)

    class Handler(BaseHTTPRequestHandler):
        def log_message(self, fmt, *args):
            pass

        def _send(self, status: int, payload: dict):
            body = json.dumps(payload).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def do_POST(self):
            if self.path != "/embed":
                self._send(404, {"error": f"no such path {self.path!r}"})
                return
            length = int(self.headers.get("Content-Length", "0"))
            try:
                self._send(200, _embed_payload(encoder, cfg, self.rfile.read(length)))
            except BadRequest as exc:
                self._send(400, {"error": str(exc)})

    return ThreadingHTTPServer(("127.0.0.1", port), Handler)


def serve(cfg: ProviderConfig, port: int) -> None:
    with make_server(cfg, port) as server:
        server.serve_forever()
