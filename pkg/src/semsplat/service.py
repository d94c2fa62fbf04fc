"""HTTP render/query service over a trained checkpoint.

GET  /meta   -> {num_gaussians, classes, D, image_size}
POST /render -> {color_png_b64, label_png_b64, overlay_png_b64?, query_class_index?}

The checkpoint is shared immutably; every request renders into its own
buffers, so concurrent requests are safe. Structured JSON errors carry
HTTP-equivalent status codes (400 malformed, 404 unresolved query,
413 oversize).
"""

from __future__ import annotations

import base64
import io
import json
import threading
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
from PIL import Image

from .geometry import Camera
from .heads import SemanticHeads, TextBank, segmentation_logits
from .metrics import predict_labels
from .rasterizer import render

MAX_PIXELS = 1024 * 1024


def class_palette(num_classes: int) -> np.ndarray:
    """Deterministic distinct class colors, golden-ratio hue spacing.

    The viewer mirrors this formula to map label-image pixels back to class
    indices, so it must stay bit-stable: hue = (i * 0.618034) mod 1,
    s = 0.72, v = 0.95, standard HSV->RGB, rounded to integer [0,255].
    """
    out = np.zeros((num_classes, 3), dtype=np.int64)
    s, v = 0.72, 0.95
    for i in range(num_classes):
        h6 = ((i * 0.618034) % 1.0) * 6.0
        k = int(h6) % 6
        f = h6 - int(h6)
        p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
        r, g, b = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][k]
        out[i] = [round(r * 255), round(g * 255), round(b * 255)]
    return out


class RequestError(Exception):
    def __init__(self, status: int, code: str, message: str):
        self.status = status
        self.code = code
        self.message = message
        super().__init__(message)


@dataclass
class RenderService:
    """Request handling, independent of the HTTP plumbing (unit-testable)."""

    scene: object
    heads: SemanticHeads
    bank: TextBank
    background: tuple = (0.0, 0.0, 0.0)
    image_size: tuple = (96, 96)
    max_pixels: int = MAX_PIXELS

    def meta(self) -> dict:
        return {
            "num_gaussians": len(self.scene),
            "classes": list(self.bank.names),
            "D": self.scene.feature_dim,
            "image_size": list(self.image_size),
        }

    def handle_render(self, payload: dict) -> dict:
        try:
            w2c = np.array(payload["w2c"], dtype=np.float64).reshape(4, 4)
            width = int(payload["width"])
            height = int(payload["height"])
            cam = Camera(float(payload["fx"]), float(payload["fy"]),
                         float(payload["cx"]), float(payload["cy"]),
                         width, height, w2c)
        except RequestError:
            raise
        except Exception as e:
            raise RequestError(400, "bad_request", f"malformed render request: {e}") from e
        if width * height > self.max_pixels:
            raise RequestError(413, "too_large",
                               f"{width}x{height} exceeds the {self.max_pixels}-pixel cap")
        overlay_alpha = float(payload.get("overlay_alpha", 0.5))
        if not 0.0 <= overlay_alpha <= 1.0:
            raise RequestError(400, "bad_request", "overlay_alpha must be in [0,1]")
        query = payload.get("query")
        query_idx = None
        if query:
            query_idx = self.bank.resolve(str(query))
            if query_idx is None:
                raise RequestError(404, "unknown_query",
                                   f"query {query!r} does not resolve to a class")

        out = render(cam, self.scene, np.asarray(self.background, dtype=np.float64))
        color = np.clip(out.color, 0.0, 1.0)
        labels = predict_labels(out.feature, self.heads, self.bank)
        palette = class_palette(self.bank.num_classes)
        label_rgb = palette[labels].astype(np.uint8)
        resp = {
            "color_png_b64": _png_b64((color * 255 + 0.5).astype(np.uint8)),
            "label_png_b64": _png_b64(label_rgb),
        }
        if query_idx is not None:
            hit = labels == query_idx
            over = color.copy()
            hl = palette[query_idx] / 255.0
            over[hit] = (1 - overlay_alpha) * over[hit] + overlay_alpha * hl
            resp["overlay_png_b64"] = _png_b64((over * 255 + 0.5).astype(np.uint8))
            resp["query_class_index"] = int(query_idx)
        return resp


def _png_b64(arr: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def make_http_server(service: RenderService, port: int = 0) -> ThreadingHTTPServer:
    class Handler(BaseHTTPRequestHandler):
        def log_message(self, *args):
            pass

        def _send(self, status: int, obj: dict):
            body = json.dumps(obj).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.send_header("Access-Control-Allow-Origin", "*")
            self.end_headers()
            self.wfile.write(body)

        def do_OPTIONS(self):
            self.send_response(204)
            self.send_header("Access-Control-Allow-Origin", "*")
            self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
            self.send_header("Access-Control-Allow-Headers", "Content-Type")
            self.end_headers()

        def do_GET(self):
            if self.path.rstrip("/") == "/meta" or self.path == "/meta":
                self._send(200, service.meta())
            else:
                self._send(404, {"error": "not_found", "message": self.path})

        def do_POST(self):
            if self.path != "/render":
                self._send(404, {"error": "not_found", "message": self.path})
                return
            try:
                length = int(self.headers.get("Content-Length", 0))
                payload = json.loads(self.rfile.read(length) or b"{}")
                self._send(200, service.handle_render(payload))
            except RequestError as e:
                self._send(e.status, {"error": e.code, "message": e.message})
            except json.JSONDecodeError as e:
                self._send(400, {"error": "bad_json", "message": str(e)})

    return ThreadingHTTPServer(("127.0.0.1", port), Handler)


def serve_forever(service: RenderService, port: int):
    server = make_http_server(service, port)
    print(f"serving on http://127.0.0.1:{server.server_address[1]}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.shutdown()
