"""Payload codecs shared by the bus protocols: JSON objects with base64 float64 blobs."""

from __future__ import annotations

import base64
import json
from typing import Any

import numpy as np


def pack(obj: dict[str, Any]) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def unpack(payload: bytes) -> dict[str, Any]:
    obj = json.loads(payload.decode("utf-8"))
    if not isinstance(obj, dict):
        raise ValueError("payload must decode to a JSON object")
    return obj


def encode_f64(arr: np.ndarray) -> str:
    """Little-endian float64 bytes as base64; exact (bitwise) round trip."""
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii")


def decode_f64(text: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(text), dtype="<f8").astype(np.float64)


def encode_i64(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<i8").tobytes()).decode("ascii")


def decode_i64(text: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(text), dtype="<i8").astype(np.int64)
