"""Backend-neutral ciphertext types, op counters and the abstract engine interface."""
from __future__ import annotations

import math
import threading
from abc import ABC, abstractmethod
from collections import Counter
from dataclasses import dataclass
from typing import Any, Iterable

import numpy as np

from .errors import AlignmentError, DepthExhaustedError, HeKeyError, RescaleRequiredError
from .params import HeParams

SCALE_RTOL = 1e-9


class OpCounter:
    """Thread-safe tally of homomorphic operations.

    Keys: ``HM`` (ciphertext products), ``SM`` (plaintext and scalar products),
    ``rot`` (key-switched rotations), ``rescale``, ``add``, ``enc``, ``dec``.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._counts: Counter = Counter()

    def bump(self, key: str, amount: int = 1) -> None:
        with self._lock:
            self._counts[key] += amount

    def snapshot(self) -> dict[str, int]:
        with self._lock:
            return dict(self._counts)

    def reset(self) -> None:
        with self._lock:
            self._counts.clear()

    def __getitem__(self, key: str) -> int:
        with self._lock:
            return self._counts.get(key, 0)


def diff_counts(after: dict[str, int], before: dict[str, int]) -> dict[str, int]:
    keys = set(after) | set(before)
    return {k: after.get(k, 0) - before.get(k, 0) for k in keys}


@dataclass(frozen=True)
class SecretKey:
    data: Any
    tag: int


@dataclass(frozen=True)
class PublicKey:
    data: Any
    tag: int


@dataclass(frozen=True)
class EvalKeys:
    """Relinearization key plus rotation keys indexed by slot step."""

    relin: Any
    rotations: dict[int, Any]
    tag: int

    @property
    def steps(self) -> frozenset[int]:
        return frozenset(self.rotations)


@dataclass(frozen=True)
class KeyTrio:
    sk: SecretKey
    pk: PublicKey
    evk: EvalKeys


@dataclass
class Plaintext:
    data: Any
    level: int
    scale: float


@dataclass
class Ciphertext:
    """Encrypted slot vector.

    ``data`` is backend-specific. ``needs_rescale`` is set by every product and
    cleared by :meth:`HeBackend.rescale`; a second product before the rescale is
    rejected so the one-product-one-rescale discipline cannot drift.
    """

    data: Any
    level: int
    scale: float
    key_tag: int
    needs_rescale: bool = False
    size: int = 2


def default_rotation_steps(params: HeParams) -> list[int]:
    """Signed powers of two up to n/4."""
    steps = []
    k = 1
    while k <= params.ring_dim // 4:
        steps += [k, -k]
        k *= 2
    return steps


class HeBackend(ABC):
    """Leveled approximate-arithmetic engine over ``params.slots`` real slots."""

    name = "abstract"

    def __init__(self, params: HeParams, seed: int | None = None):
        self.params = params
        self.counter = OpCounter()
        self._rng = np.random.default_rng(seed)
        self._rng_lock = threading.Lock()

    # key management -----------------------------------------------------
    @abstractmethod
    def generate_keys(self, rotation_steps: Iterable[int] | None = None) -> KeyTrio: ...

    # encoding -----------------------------------------------------------
    @abstractmethod
    def encode(self, values, scale: float | None = None, level: int | None = None) -> Plaintext: ...

    @abstractmethod
    def decode(self, pt: Plaintext) -> np.ndarray: ...

    # encryption ---------------------------------------------------------
    @abstractmethod
    def _encrypt(self, pt: Plaintext, pk: PublicKey) -> Ciphertext: ...

    @abstractmethod
    def _decrypt(self, ct: Ciphertext, sk: SecretKey) -> Plaintext: ...

    def encrypt(self, pt: Plaintext, pk: PublicKey) -> Ciphertext:
        self.counter.bump("enc")
        return self._encrypt(pt, pk)

    def decrypt(self, ct: Ciphertext, sk: SecretKey) -> Plaintext:
        self._check_tag(ct, sk)
        self.counter.bump("dec")
        return self._decrypt(ct, sk)

    def encrypt_values(self, values, pk: PublicKey, scale: float | None = None, level: int | None = None) -> Ciphertext:
        return self.encrypt(self.encode(values, scale, level), pk)

    def decrypt_values(self, ct: Ciphertext, sk: SecretKey) -> np.ndarray:
        return self.decode(self.decrypt(ct, sk))

    # arithmetic ---------------------------------------------------------
    @abstractmethod
    def _add(self, a: Ciphertext, b: Ciphertext, sign: int) -> Ciphertext: ...

    @abstractmethod
    def _add_plain(self, ct: Ciphertext, pt: Plaintext, sign: int) -> Ciphertext: ...

    @abstractmethod
    def _add_const(self, ct: Ciphertext, c: float) -> Ciphertext: ...

    @abstractmethod
    def negate(self, ct: Ciphertext) -> Ciphertext: ...

    @abstractmethod
    def _multiply(self, a: Ciphertext, b: Ciphertext, evk: EvalKeys) -> Ciphertext: ...

    @abstractmethod
    def _multiply_plain(self, ct: Ciphertext, pt: Plaintext) -> Ciphertext: ...

    @abstractmethod
    def _scalar_mult(self, ct: Ciphertext, c: float, scale: float) -> Ciphertext: ...

    @abstractmethod
    def _rescale(self, ct: Ciphertext) -> Ciphertext: ...

    @abstractmethod
    def _drop_level(self, ct: Ciphertext, level: int) -> Ciphertext: ...

    @abstractmethod
    def _rotate_one(self, ct: Ciphertext, steps: int, evk: EvalKeys) -> Ciphertext: ...

    def debug_peek(self, ct: Ciphertext) -> np.ndarray | None:
        """Cleartext slot values when the backend can see them (mock only)."""
        return None

    # checked public operations ------------------------------------------
    @staticmethod
    def _check_pair(a: Ciphertext, b) -> None:
        if a.level != b.level:
            raise AlignmentError(f"level mismatch {a.level} vs {b.level}; call drop_level first")
        if not math.isclose(a.scale, b.scale, rel_tol=SCALE_RTOL):
            raise AlignmentError(f"scale mismatch {a.scale:.6e} vs {b.scale:.6e}")

    @staticmethod
    def _check_tag(ct: Ciphertext, key) -> None:
        if ct.key_tag != key.tag:
            raise HeKeyError("key belongs to a different key trio")

    def add(self, a: Ciphertext, b: Ciphertext) -> Ciphertext:
        self._check_pair(a, b)
        self.counter.bump("add")
        return self._add(a, b, +1)

    def sub(self, a: Ciphertext, b: Ciphertext) -> Ciphertext:
        self._check_pair(a, b)
        self.counter.bump("add")
        return self._add(a, b, -1)

    def add_plain(self, ct: Ciphertext, pt: Plaintext) -> Ciphertext:
        if pt.level < ct.level:
            raise AlignmentError(f"plaintext level {pt.level} below ciphertext level {ct.level}")
        if not math.isclose(ct.scale, pt.scale, rel_tol=SCALE_RTOL):
            raise AlignmentError(f"scale mismatch {ct.scale:.6e} vs {pt.scale:.6e}")
        self.counter.bump("add")
        return self._add_plain(ct, pt, +1)

    def add_const(self, ct: Ciphertext, c: float) -> Ciphertext:
        """Add the same real constant to every slot (encoded at the ciphertext scale)."""
        self.counter.bump("add")
        return self._add_const(ct, float(c))

    def add_many(self, cts: list[Ciphertext]) -> Ciphertext:
        """Left-to-right sum."""
        acc = cts[0]
        for ct in cts[1:]:
            acc = self.add(acc, ct)
        return acc

    def _check_product(self, *cts: Ciphertext) -> None:
        for ct in cts:
            if ct.needs_rescale:
                raise RescaleRequiredError("operand must be rescaled before another product")
            if ct.level < 1:
                raise DepthExhaustedError("no level left for a product followed by a rescale")

    def multiply(self, a: Ciphertext, b: Ciphertext, evk: EvalKeys) -> Ciphertext:
        """Slot-wise product with relinearization; the caller rescales next."""
        if a.level != b.level:
            raise AlignmentError(f"level mismatch {a.level} vs {b.level}; call drop_level first")
        self._check_product(a, b)
        self._check_tag(a, evk)
        self.counter.bump("HM")
        return self._multiply(a, b, evk)

    def square(self, a: Ciphertext, evk: EvalKeys) -> Ciphertext:
        return self.multiply(a, a, evk)

    def multiply_plain(self, ct: Ciphertext, pt: Plaintext) -> Ciphertext:
        if pt.level < ct.level:
            raise AlignmentError(f"plaintext level {pt.level} below ciphertext level {ct.level}")
        self._check_product(ct)
        self.counter.bump("SM")
        return self._multiply_plain(ct, pt)

    def scalar_mult(self, ct: Ciphertext, c: float, scale: float | None = None) -> Ciphertext:
        """Multiply every slot by ``c`` encoded at ``scale`` (default the base scale)."""
        self._check_product(ct)
        self.counter.bump("SM")
        return self._scalar_mult(ct, float(c), float(scale or self.params.scale))

    def rescale(self, ct: Ciphertext) -> Ciphertext:
        if ct.level < 1:
            raise DepthExhaustedError("cannot rescale at level 0")
        self.counter.bump("rescale")
        return self._rescale(ct)

    def drop_level(self, ct: Ciphertext, level: int) -> Ciphertext:
        """Explicit alignment: discard top moduli without changing the scale."""
        if level > ct.level or level < 0:
            raise AlignmentError(f"cannot move from level {ct.level} to {level}")
        if level == ct.level:
            return ct
        return self._drop_level(ct, level)

    def rotate(self, ct: Ciphertext, steps: int, evk: EvalKeys) -> Ciphertext:
        """Cyclic left shift of the slot vector by ``steps`` (negative shifts right)."""
        self._check_tag(ct, evk)
        if ct.needs_rescale:
            raise RescaleRequiredError("rescale before rotating")
        slots = self.params.slots
        s = steps % slots
        if s == 0:
            return ct
        for part in self.rotation_plan(s, evk):
            self.counter.bump("rot")
            ct = self._rotate_one(ct, part, evk)
        return ct

    def rotation_plan(self, steps: int, evk: EvalKeys) -> list[int]:
        """Key steps whose composition equals a left shift by ``steps``."""
        slots = self.params.slots
        s = steps % slots
        for cand in (s, s - slots):
            if cand in evk.rotations:
                return [cand]
        parts = []
        bit = 1
        rem = s
        while rem:
            if rem & bit:
                if bit not in evk.rotations:
                    raise HeKeyError(f"no rotation key for step {steps} and no power-of-two decomposition")
                parts.append(bit)
                rem ^= bit
            bit <<= 1
        return parts

