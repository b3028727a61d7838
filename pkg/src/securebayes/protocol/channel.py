"""In-process message fabric with per-pair FIFO delivery and a transcript.

Every send gets a global sequence number and a transcript record. Messages
wait in one FIFO per ordered (sender, receiver) pair; a receiver asks for the
next message from a given sender, so delivery order never depends on thread
timing. A delay model charges simulated transfer time per message.
"""
from __future__ import annotations

import json
import threading
from collections import defaultdict, deque
from dataclasses import dataclass
from pathlib import Path

from .messages import CIPHERTEXT_KINDS, Message, PartyId, encode_clear
from ..he import serialize


class ChannelError(RuntimeError):
    pass


@dataclass(frozen=True)
class LinearDelay:
    """latency + bytes / bandwidth seconds per message."""

    latency: float = 0.0
    bandwidth: float = float("inf")

    def __call__(self, sender: PartyId, receiver: PartyId, nbytes: int) -> float:
        return self.latency + nbytes / self.bandwidth


class Fabric:
    def __init__(self, delay=None):
        self.delay = delay or LinearDelay()
        self._queues: dict[tuple[PartyId, PartyId], deque[Message]] = defaultdict(deque)
        self._lock = threading.Lock()
        self._seq = 0
        self.transcript: list[Message] = []
        self.sim_time: dict[str, float] = defaultdict(float)
        self.bytes_sent: dict[str, int] = defaultdict(int)

    def send(self, sender: PartyId, receiver: PartyId, phase: str, kind: str, body, meta: tuple = ()) -> Message:
        payload = serialize.dumps(body) if kind in CIPHERTEXT_KINDS else encode_clear(body)
        with self._lock:
            self._seq += 1
            msg = Message(self._seq, sender, receiver, phase, kind, payload, meta)
            self._queues[(sender, receiver)].append(msg)
            self.transcript.append(msg)
            self.sim_time[str(sender)] += self.delay(sender, receiver, msg.nbytes)
            self.bytes_sent[str(sender)] += msg.nbytes
        return msg

    def recv(self, receiver: PartyId, sender: PartyId, kind: str | None = None) -> Message:
        with self._lock:
            q = self._queues.get((sender, receiver))
            if not q:
                raise ChannelError(f"{receiver} expected a message from {sender}, none pending")
            msg = q.popleft()
        if kind is not None and msg.kind != kind:
            raise ChannelError(f"{receiver} expected {kind} from {sender}, got {msg.kind}")
        return msg

    def pending(self) -> int:
        with self._lock:
            return sum(len(q) for q in self._queues.values())

    def view(self, party: PartyId) -> list[Message]:
        """Messages delivered to ``party``: what it observes."""
        return [m for m in self.transcript if m.receiver == party]

    def records(self) -> list[dict]:
        return [m.record() for m in self.transcript]

    def to_jsonl(self, path: str | Path) -> None:
        with Path(path).open("w") as fh:
            for rec in self.records():
                fh.write(json.dumps(rec) + "\n")
