"""Shared helpers for on-disk artifacts: bit-exact arrays, digests, JSONL."""

from __future__ import annotations

import base64
import hashlib
import json
from pathlib import Path

import numpy as np


def encode_array(a: np.ndarray) -> dict:
    """Encode a float64 array as base64 bytes so round-trips are bit-exact."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    return {
        "shape": list(a.shape),
        "dtype": "float64",
        "data": base64.b64encode(a.tobytes()).decode("ascii"),
    }


def decode_array(d: dict) -> np.ndarray:
    if d.get("dtype") != "float64":
        raise ValueError(f"unsupported array dtype {d.get('dtype')!r}")
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype=np.float64).reshape(d["shape"]).copy()


def canonical_json(obj) -> str:
    """Deterministic JSON: sorted keys, no whitespace drift."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def digest_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def digest_obj(obj) -> str:
    return digest_text(canonical_json(obj))


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path) -> dict:
    return json.loads(Path(path).read_text())


def write_jsonl(path, header: dict, records) -> None:
    """Write a JSONL file with a single header line followed by records."""
    with open(path, "w") as fh:
        fh.write(canonical_json(header) + "\n")
        for rec in records:
            fh.write(canonical_json(rec) + "\n")


def read_jsonl(path) -> tuple[dict, list[dict]]:
    """Read a header-plus-records JSONL file written by write_jsonl."""
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty artifact")
    header = json.loads(lines[0])
    return header, [json.loads(ln) for ln in lines[1:]]
