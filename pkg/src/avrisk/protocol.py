"""Newline-delimited JSON messages exchanged with simulator workers.

Requests carry ``{"id", "seed", "latent", "scenario"}`` and responses
``{"id", "objective", "wall_ms"}``, with keys in exactly that order, compact
separators, and floats written in shortest round-trip form.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

REQUEST_FIELDS = ("id", "seed", "latent", "scenario")
RESPONSE_FIELDS = ("id", "objective", "wall_ms")
MAX_SEED = 2 ** 64 - 1


class ProtocolError(ValueError):
    pass


@dataclass(frozen=True)
class EvalRequest:
    id: int
    seed: int
    latent: tuple
    scenario: tuple


@dataclass(frozen=True)
class EvalResponse:
    id: int
    objective: float
    wall_ms: int


def _reject_constant(name):
    raise ProtocolError(f"non-finite number {name} not allowed")


def _float_list(values, field: str) -> list[float]:
    out = []
    for v in values:
        f = float(v)
        if not math.isfinite(f):
            raise ProtocolError(f"{field} contains a non-finite value")
        out.append(f)
    return out


def _dumps(doc: dict) -> str:
    return json.dumps(doc, separators=(",", ":"), allow_nan=False)


def encode_request(req: EvalRequest) -> str:
    return _dumps({
        "id": int(req.id),
        "seed": int(req.seed),
        "latent": _float_list(req.latent, "latent"),
        "scenario": _float_list(req.scenario, "scenario"),
    })


def encode_response(resp: EvalResponse) -> str:
    obj = float(resp.objective)
    if not math.isfinite(obj):
        raise ProtocolError("objective must be finite")
    return _dumps({"id": int(resp.id), "objective": obj, "wall_ms": int(resp.wall_ms)})


def _load(line: str, fields: tuple) -> dict:
    try:
        doc = json.loads(line, parse_constant=_reject_constant)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"malformed JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ProtocolError("message must be a JSON object")
    missing = [f for f in fields if f not in doc]
    if missing:
        raise ProtocolError(f"missing field(s): {', '.join(missing)}")
    unknown = [k for k in doc if k not in fields]
    if unknown:
        raise ProtocolError(f"unknown field(s): {', '.join(unknown)}")
    return doc


def _int(doc: dict, key: str, lo: int = 0, hi: int | None = None) -> int:
    v = doc[key]
    if isinstance(v, bool) or not isinstance(v, int):
        raise ProtocolError(f"{key} must be an integer")
    if v < lo or (hi is not None and v > hi):
        raise ProtocolError(f"{key} out of range")
    return v


def _vector(doc: dict, key: str) -> tuple:
    v = doc[key]
    if not isinstance(v, list) or any(isinstance(e, bool) or not isinstance(e, (int, float)) for e in v):
        raise ProtocolError(f"{key} must be an array of numbers")
    return tuple(float(e) for e in v)


def decode_request(line: str) -> EvalRequest:
    doc = _load(line, REQUEST_FIELDS)
    return EvalRequest(id=_int(doc, "id"), seed=_int(doc, "seed", 0, MAX_SEED),
                       latent=_vector(doc, "latent"), scenario=_vector(doc, "scenario"))


def decode_response(line: str) -> EvalResponse:
    doc = _load(line, RESPONSE_FIELDS)
    obj = doc["objective"]
    if isinstance(obj, bool) or not isinstance(obj, (int, float)):
        raise ProtocolError("objective must be a number")
    return EvalResponse(id=_int(doc, "id"), objective=float(obj), wall_ms=_int(doc, "wall_ms"))
