"""Party identities and the serialized messages they exchange."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from ..he import serialize
from ..he.backend import Ciphertext


@dataclass(frozen=True, order=True)
class PartyId:
    role: str
    index: int = 0

    def __post_init__(self):
        if self.role not in ("site", "server", "csp"):
            raise ValueError(f"unknown role {self.role!r}")
        if self.role == "site" and self.index < 1:
            raise ValueError("site indices start at 1")

    def __str__(self) -> str:
        return f"site{self.index}" if self.role == "site" else self.role


SERVER = PartyId("server")
CSP = PartyId("csp")


def site(k: int) -> PartyId:
    return PartyId("site", k)


# payload kinds; the Enc* kinds carry one serialized ciphertext
ENC_COUNT = "EncCount"
ENC_MEAN = "EncMean"
ENC_SUM = "EncSum"
ENC_VARIANCE_PART = "EncVariancePart"
ENC_VARIANCE = "EncVariance"
ENC_NORM = "EncNorm"
ENC_MASKED_NORM = "EncMaskedNorm"
ENC_MASKED_MAX = "EncMaskedMax"
ENC_MAX = "EncMax"
GLOBAL_STATS = "GlobalStats"
ENC_GRADIENT = "EncGradient"
ENC_THETA = "EncTheta"
THETA_BROADCAST = "ThetaBroadcast"
ABORT = "Abort"

CIPHERTEXT_KINDS = frozenset({
    ENC_COUNT, ENC_MEAN, ENC_SUM, ENC_VARIANCE_PART, ENC_VARIANCE, ENC_NORM, ENC_MASKED_NORM,
    ENC_MASKED_MAX, ENC_MAX, ENC_GRADIENT, ENC_THETA,
})
CLEAR_KINDS = frozenset({GLOBAL_STATS, THETA_BROADCAST, ABORT})


@dataclass(frozen=True)
class Message:
    seq: int
    sender: PartyId
    receiver: PartyId
    phase: str
    kind: str
    payload: bytes
    meta: tuple = ()

    @property
    def nbytes(self) -> int:
        return len(self.payload)

    def ciphertext(self) -> Ciphertext:
        if self.kind not in CIPHERTEXT_KINDS:
            raise TypeError(f"{self.kind} does not carry a ciphertext")
        return serialize.loads(self.payload)

    def clear(self) -> dict:
        if self.kind not in CLEAR_KINDS:
            raise TypeError(f"{self.kind} carries a ciphertext")
        return decode_clear(self.payload)

    def record(self) -> dict:
        return {"seq": self.seq, "from": str(self.sender), "to": str(self.receiver), "phase": self.phase,
                "payload_kind": self.kind, "bytes": self.nbytes}


def _default(o):
    if isinstance(o, np.ndarray):
        return {"__array__": o.tolist()}
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"cannot encode {type(o).__name__}")


def _hook(d):
    return np.array(d["__array__"], dtype=np.float64) if "__array__" in d else d


def encode_clear(body: dict) -> bytes:
    return json.dumps(body, default=_default).encode()


def decode_clear(buf: bytes) -> dict:
    return json.loads(buf.decode(), object_hook=_hook)
