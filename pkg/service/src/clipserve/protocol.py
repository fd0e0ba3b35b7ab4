"""Wire protocol: JSON envelopes carrying float32 arrays as base64 of the raw
little-endian bytes. Version 1.

Request:  {"protocol": 1, "prompt": str, "images": <array doc>}
Response: {"loss": float, "grads": <array doc>}
Array doc: {"dtype": "float32", "shape": [...], "data": <base64>}
"""

import base64

import numpy as np

PROTOCOL_VERSION = 1
IMAGE_SIZE = 224
MAX_BATCH = 64
RANGE_SLACK = 1e-6  # absorbs float32 round-off on the [0,1] bounds


class ProtocolError(ValueError):
    """A malformed or out-of-contract request; status is the HTTP code."""

    def __init__(self, message: str, status: int = 400):
        super().__init__(message)
        self.status = status


def encode_array(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    return {
        "dtype": "float32",
        "shape": list(arr.shape),
        "data": base64.b64encode(arr.tobytes()).decode("ascii"),
    }


def decode_array(doc) -> np.ndarray:
    if not isinstance(doc, dict):
        raise ProtocolError("array document must be a JSON object")
    if doc.get("dtype") != "float32":
        raise ProtocolError(f"unsupported wire dtype {doc.get('dtype')!r}")
    try:
        shape = tuple(int(s) for s in doc["shape"])
        raw = base64.b64decode(doc["data"], validate=True)
    except (KeyError, TypeError, ValueError) as exc:
        raise ProtocolError(f"malformed array document: {exc}") from exc
    if any(s < 0 for s in shape):
        raise ProtocolError(f"negative dimension in shape {list(shape)}")
    expected = int(np.prod(shape)) * 4
    if len(raw) != expected:
        raise ProtocolError(f"payload holds {len(raw)} bytes, shape needs {expected}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape)


def validate_request(payload) -> tuple[str, np.ndarray]:
    """Check a /style_grad body; returns (prompt, images float32 [B,H,W,3])."""
    if not isinstance(payload, dict):
        raise ProtocolError("request body must be a JSON object")
    version = payload.get("protocol")
    if version != PROTOCOL_VERSION:
        raise ProtocolError(
            f"protocol version {version!r} not supported; this service speaks "
            f"version {PROTOCOL_VERSION}")
    prompt = payload.get("prompt")
    if not isinstance(prompt, str) or not prompt.strip():
        raise ProtocolError("prompt must be a non-empty string")
    images = decode_array(payload.get("images"))
    if images.ndim != 4 or images.shape[3] != 3:
        raise ProtocolError(f"images must have shape [B, H, W, 3], got {list(images.shape)}")
    batch, h, w = images.shape[:3]
    if batch < 1:
        raise ProtocolError("image batch is empty")
    if batch > MAX_BATCH:
        raise ProtocolError(f"batch of {batch} exceeds the limit of {MAX_BATCH}")
    if (h, w) != (IMAGE_SIZE, IMAGE_SIZE):
        raise ProtocolError(f"images must be {IMAGE_SIZE}x{IMAGE_SIZE}, got {h}x{w}")
    if not np.isfinite(images).all():
        raise ProtocolError("images contain non-finite values")
    if images.min() < -RANGE_SLACK or images.max() > 1.0 + RANGE_SLACK:
        raise ProtocolError("image values must lie in [0, 1]")
    return prompt, images
