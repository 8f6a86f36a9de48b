"""The black-box access boundary around the source model.

The adaptation side sees the source model only as a :class:`BlackBoxPredictor`:
a callable mapping an image to a soft label map. Pseudo-labels are fetched
once into a :class:`PseudoLabelCache` and persisted, and the predictor can be
served over HTTP so the source owner and the adapting party can live in
separate processes.
"""

from __future__ import annotations

import copy
import http.client
import json
import struct
import threading
import time
import zlib
from datetime import datetime, timezone
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .data import Dataset, check_soft_labels, resize
from .errors import InputError, PredictorError, ProtocolError, TransportError


class BlackBoxPredictor:
    """Opaque image -> soft-label-map oracle.

    Only ``__call__`` reaches the wrapped function; the handle keeps no
    reference to a model object that could be read back.
    """

    __slots__ = ("_query", "_lock", "_count", "num_classes", "input_size", "name")

    def __init__(self, query: Callable[[np.ndarray], np.ndarray], num_classes: int,
                 input_size: Optional[tuple[int, int]] = None, name: str = "predictor"):
        self._query = query
        self._lock = threading.Lock()
        self._count = 0
        self.num_classes = int(num_classes)
        self.input_size = None if input_size is None else tuple(int(v) for v in input_size)
        self.name = name

    def __call__(self, image) -> np.ndarray:
        image = np.asarray(image, dtype=np.float32)
        if image.ndim == 2:
            image = image[:, :, None]
        with self._lock:
            self._count += 1
        out = np.asarray(self._query(image), dtype=np.float32)
        if out.shape != image.shape[:2] + (self.num_classes,):
            raise InputError(f"predictor returned shape {out.shape} for image {image.shape}")
        check_soft_labels(out)
        return out

    @property
    def query_count(self) -> int:
        return self._count

    def __reduce__(self):
        raise TypeError("black-box predictors cannot be serialized")

    def __repr__(self):
        return f"BlackBoxPredictor(name={self.name!r}, num_classes={self.num_classes})"


def wrap_as_blackbox(model, input_size=None, name: str = "source") -> BlackBoxPredictor:
    """Freeze a private copy of ``model`` and expose only its eval-mode softmax output."""
    from .models import predict_proba

    frozen = copy.deepcopy(model).eval()
    for p in frozen.parameters():
        p.requires_grad_(False)
    num_classes = frozen.spec.num_classes

    def query(image):
        return predict_proba(frozen, image)

    return BlackBoxPredictor(query, num_classes, input_size, name)


# ---------------------------------------------------------------------------
# pseudo-label cache
#
# file layout (little-endian):
#   b"BBPL" u16 version u32 count
#   per record: u16 id_len, id utf-8, u32 h, u32 w, u32 k, float32[h*w*k], u32 crc32(payload)

_MAGIC = b"BBPL"
_VERSION = 1


class PseudoLabelCache:
    def __init__(self, entries: dict, provenance: Optional[dict] = None, query_count: int = 0):
        self.entries = dict(entries)
        self.provenance = provenance or {}
        self.query_count = query_count

    def __len__(self):
        return len(self.entries)

    def __contains__(self, sample_id):
        return sample_id in self.entries

    def __getitem__(self, sample_id) -> np.ndarray:
        return self.entries[sample_id]

    def missing(self, dataset: Dataset) -> list[str]:
        return [i for i in dataset.ids if i not in self.entries]

    def to_bytes(self) -> bytes:
        parts = [_MAGIC, struct.pack("<HI", _VERSION, len(self.entries))]
        for sid, probs in self.entries.items():
            key = sid.encode()
            payload = np.ascontiguousarray(probs, dtype="<f4").tobytes()
            h, w, k = probs.shape
            parts += [struct.pack("<H", len(key)), key, struct.pack("<III", h, w, k), payload,
                      struct.pack("<I", zlib.crc32(payload))]
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "PseudoLabelCache":
        if raw[:4] != _MAGIC:
            raise ProtocolError("not a pseudo-label cache file")
        version, count = struct.unpack_from("<HI", raw, 4)
        if version != _VERSION:
            raise ProtocolError(f"unsupported cache version {version}")
        pos, entries = 10, {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", raw, pos)
            sid = raw[pos + 2:pos + 2 + n].decode()
            pos += 2 + n
            h, w, k = struct.unpack_from("<III", raw, pos)
            pos += 12
            size = 4 * h * w * k
            payload = raw[pos:pos + size]
            pos += size
            (crc,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            if zlib.crc32(payload) != crc:
                raise ProtocolError(f"checksum mismatch for sample {sid!r}")
            entries[sid] = np.frombuffer(payload, dtype="<f4").reshape(h, w, k).astype(np.float32)
        return cls(entries, query_count=0)

    def save(self, path) -> Path:
        """Write the cache and a ``.meta.json`` sidecar holding provenance.

        The cache file itself depends only on the labels, so reruns and
        local/remote predictors produce byte-identical files.
        """
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        meta = dict(self.provenance, query_count=self.query_count, samples=len(self))
        path.with_suffix(path.suffix + ".meta.json").write_text(json.dumps(meta, indent=2))
        return path

    @classmethod
    def load(cls, path) -> "PseudoLabelCache":
        path = Path(path)
        cache = cls.from_bytes(path.read_bytes())
        sidecar = path.with_suffix(path.suffix + ".meta.json")
        if sidecar.exists():
            meta = json.loads(sidecar.read_text())
            cache.query_count = meta.pop("query_count", 0)
            meta.pop("samples", None)
            cache.provenance = meta
        return cache


def precompute_pseudo_labels(predictor: BlackBoxPredictor, target_train: Dataset,
                             path=None) -> PseudoLabelCache:
    """Query the predictor once per sample and keep the soft labels.

    Images are resized to ``predictor.input_size`` when it is set, and the
    returned maps are resized back to the sample's own resolution.
    """
    if len(target_train) == 0:
        raise InputError("target_train is empty")
    entries = {}
    for s in target_train:
        image = s.image
        h, w = image.shape[:2]
        if predictor.input_size is not None and predictor.input_size != (h, w):
            image = np.clip(resize(image, *predictor.input_size), 0, 1)
        try:
            probs = predictor(image)
        except Exception as e:
            raise PredictorError(s.id, e) from e
        if probs.shape[:2] != (h, w):
            probs = resize(probs, h, w)
            probs = probs / probs.sum(axis=-1, keepdims=True)
        entries[s.id] = probs
    provenance = {"predictor": predictor.name,
                  "created": datetime.now(timezone.utc).isoformat(timespec="seconds")}
    cache = PseudoLabelCache(entries, provenance, query_count=len(entries))
    if path is not None:
        cache.save(path)
    return cache


# ---------------------------------------------------------------------------
# wire protocol
#
# POST /predict  body: b"BBQ1" u32 h, u32 w, u32 c, u32 nbytes, float32[h*w*c]
#          200   body: b"BBR1" u32 h, u32 w, u32 k, u32 nbytes, float32[h*w*k]
#          400   JSON {"error": ...}
# GET  /health   JSON {"num_classes": K, "input_size": [h, w] | null}

_REQ, _RESP = b"BBQ1", b"BBR1"
_HEADER = struct.Struct("<4sIIII")


def encode_array(magic: bytes, arr: np.ndarray) -> bytes:
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    h, w, c = arr.shape
    return _HEADER.pack(magic, h, w, c, len(payload)) + payload


def decode_array(magic: bytes, raw: bytes) -> np.ndarray:
    if len(raw) < _HEADER.size:
        raise ProtocolError("payload shorter than header")
    tag, h, w, c, n = _HEADER.unpack_from(raw)
    if tag != magic:
        raise ProtocolError(f"bad payload tag {tag!r}")
    if n != 4 * h * w * c or len(raw) != _HEADER.size + n:
        raise ProtocolError("payload length does not match header")
    if min(h, w, c) == 0:
        raise ProtocolError("empty array in payload")
    return np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(h, w, c).astype(np.float32)


class _Handler(BaseHTTPRequestHandler):
    predictor: BlackBoxPredictor = None  # set on the per-server subclass
    protocol_version = "HTTP/1.1"

    def log_message(self, *args):
        pass

    def _send(self, code, body: bytes, ctype):
        self.send_response(code)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _error(self, code, msg):
        self._send(code, json.dumps({"error": msg}).encode(), "application/json")

    def do_GET(self):
        if self.path != "/health":
            return self._error(404, f"no route {self.path}")
        p = self.predictor
        body = {"num_classes": p.num_classes, "input_size": p.input_size and list(p.input_size)}
        self._send(200, json.dumps(body).encode(), "application/json")

    def do_POST(self):
        if self.path != "/predict":
            return self._error(404, f"no route {self.path}")
        raw = self.rfile.read(int(self.headers.get("Content-Length", 0)))
        try:
            image = decode_array(_REQ, raw)
            p = self.predictor
            if p.input_size is not None and image.shape[:2] != p.input_size:
                raise ProtocolError(f"expected input size {p.input_size}, got {image.shape[:2]}")
            if image.min() < 0 or image.max() > 1 or not np.isfinite(image).all():
                raise ProtocolError("image values must be finite and within [0, 1]")
            probs = p(image)
        except (ProtocolError, InputError) as e:
            return self._error(400, str(e))
        except Exception as e:  # keep serving after predictor faults
            return self._error(500, f"{type(e).__name__}: {e}")
        self._send(200, encode_array(_RESP, probs), "application/octet-stream")


class PredictorService:
    """A running HTTP service; use as a context manager or call :meth:`shutdown`."""

    def __init__(self, predictor: BlackBoxPredictor, bind_address=("127.0.0.1", 0)):
        handler = type("Handler", (_Handler,), {"predictor": predictor})
        self.server = ThreadingHTTPServer(tuple(bind_address), handler)
        self.server.daemon_threads = True
        self._thread = None

    @property
    def address(self) -> tuple[str, int]:
        return self.server.server_address[:2]

    @property
    def url(self) -> str:
        host, port = self.address
        return f"http://{host}:{port}"

    def start(self) -> "PredictorService":
        self._thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def serve_forever(self):
        self.server.serve_forever()

    def shutdown(self):
        if self._thread is not None:
            self.server.shutdown()
            self._thread.join()
        self.server.server_close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()


def serve_predictor(predictor: BlackBoxPredictor, bind_address=("127.0.0.1", 0)) -> PredictorService:
    """Start serving ``predictor`` in a background thread."""
    return PredictorService(predictor, bind_address).start()


def _parse_address(address) -> tuple[str, int]:
    if isinstance(address, str):
        address = address.removeprefix("http://").rstrip("/")
        host, _, port = address.rpartition(":")
        return host, int(port)
    host, port = address
    return host, int(port)


def _request(address, method, path, body=None, retries=3, backoff=0.1, timeout=30.0):
    host, port = address
    for attempt in range(retries):
        try:
            conn = http.client.HTTPConnection(host, port, timeout=timeout)
            try:
                conn.request(method, path, body=body)
                resp = conn.getresponse()
                return resp.status, resp.read()
            finally:
                conn.close()
        except (OSError, http.client.HTTPException) as e:
            if attempt == retries - 1:
                raise TransportError(f"{method} {path} to {host}:{port} failed after {retries} attempts: {e}") from e
            time.sleep(backoff * 2 ** attempt)


def remote_predictor(address, retries: int = 3, backoff: float = 0.1) -> BlackBoxPredictor:
    """Client-side predictor for a service started by :func:`serve_predictor`."""
    addr = _parse_address(address)
    status, raw = _request(addr, "GET", "/health", retries=retries, backoff=backoff)
    if status != 200:
        raise ProtocolError(f"health check returned {status}")
    health = json.loads(raw)

    def query(image):
        status, raw = _request(addr, "POST", "/predict", encode_array(_REQ, image), retries, backoff)
        if status != 200:
            try:
                msg = json.loads(raw)["error"]
            except (ValueError, KeyError):
                msg = raw[:200]
            raise ProtocolError(f"server returned {status}: {msg}")
        return decode_array(_RESP, raw)

    return BlackBoxPredictor(query, health["num_classes"], health["input_size"],
                             name=f"remote:{addr[0]}:{addr[1]}")
