"""Parameter sets, NTT-friendly prime chains and per-prime transform tables."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from typing import Sequence

import numpy as np
from sympy import isprime

from .errors import ParameterError


def _bit_reverse(i: int, bits: int) -> int:
    return int(format(i, f"0{bits}b")[::-1], 2) if bits else 0


def find_ntt_primes(bits: int, count: int, ring_dim: int, exclude: Sequence[int] = ()) -> list[int]:
    """Largest ``count`` primes below ``2**bits`` with ``p = 1 mod 2n``."""
    step = 2 * ring_dim
    p = ((1 << bits) - 1) // step * step + 1
    found: list[int] = []
    while len(found) < count:
        if p < (1 << (bits - 1)):
            raise ParameterError(f"not enough {bits}-bit NTT primes for n={ring_dim}")
        if p not in exclude and isprime(p):
            found.append(p)
        p -= step
    return found


def primitive_root_2n(q: int, ring_dim: int) -> int:
    """Smallest-generator primitive 2n-th root of unity mod q."""
    m = 2 * ring_dim
    if (q - 1) % m:
        raise ParameterError(f"{q} is not 1 mod {m}; no negacyclic NTT exists")
    for x in range(2, 10_000):
        g = pow(x, (q - 1) // m, q)
        if pow(g, ring_dim, q) == q - 1:
            return g
    raise ParameterError(f"no primitive {m}-th root found mod {q}")


@dataclass(frozen=True)
class HeParams:
    """Ring dimension, scale and modulus chain of a leveled CKKS instance.

    ``chain_bits[0]`` is the base prime q_0; the ciphertext level equals the
    index of the top prime still present. ``moduli`` may be passed explicitly
    (validated) or is generated from the bit sizes.
    """

    ring_dim: int
    scale_bits: int = 45
    chain_bits: tuple[int, ...] = (55, 45, 45, 45, 45, 45, 45)
    special_bits: int = 55
    sigma: float = 3.2
    moduli: tuple[int, ...] | None = None
    special_modulus: int | None = None
    name: str = "custom"

    def __post_init__(self):
        n = self.ring_dim
        if n < 8 or n & (n - 1):
            raise ParameterError(f"ring_dim must be a power of two >= 8, got {n}")
        if len(self.chain_bits) < 1:
            raise ParameterError("modulus chain is empty")
        if max(list(self.chain_bits) + [self.special_bits]) > 60:
            raise ParameterError("primes above 60 bits are not supported")
        if self.moduli is None:
            object.__setattr__(self, "moduli", tuple(self._generate_chain()))
        else:
            object.__setattr__(self, "moduli", tuple(int(q) for q in self.moduli))
        if self.special_modulus is None:
            sp = find_ntt_primes(self.special_bits, 1, n, exclude=self.moduli)[0]
            object.__setattr__(self, "special_modulus", sp)
        for q in list(self.moduli) + [self.special_modulus]:
            if (q - 1) % (2 * n) or not isprime(q):
                raise ParameterError(f"{q} is not an NTT-friendly prime for n={n}")
        if len(set(self.moduli) | {self.special_modulus}) != len(self.moduli) + 1:
            raise ParameterError("chain primes must be distinct")

    def _generate_chain(self) -> list[int]:
        chosen: list[int] = []
        by_bits: dict[int, int] = {}
        for b in self.chain_bits:
            by_bits[b] = by_bits.get(b, 0) + 1
        pools = {b: find_ntt_primes(b, c, self.ring_dim) for b, c in by_bits.items()}
        used = {b: 0 for b in pools}
        for b in self.chain_bits:
            chosen.append(pools[b][used[b]])
            used[b] += 1
        return chosen

    @property
    def slots(self) -> int:
        return self.ring_dim // 2

    @property
    def max_level(self) -> int:
        return len(self.moduli) - 1

    @property
    def scale(self) -> float:
        return float(2 ** self.scale_bits)

    @property
    def log_pq(self) -> int:
        return sum(self.chain_bits) + self.special_bits

    def modulus_at(self, level: int) -> int:
        return math.prod(self.moduli[: level + 1])

    def to_json(self) -> dict:
        return {
            "ring_dim": self.ring_dim,
            "scale_bits": self.scale_bits,
            "chain_bits": list(self.chain_bits),
            "special_bits": self.special_bits,
            "sigma": self.sigma,
        }

    @classmethod
    def from_json(cls, data: dict, name: str = "custom") -> "HeParams":
        required = {"ring_dim", "scale_bits", "chain_bits", "special_bits", "sigma"}
        missing = required - set(data)
        if missing:
            raise ParameterError(f"preset is missing fields {sorted(missing)}")
        return cls(
            ring_dim=int(data["ring_dim"]),
            scale_bits=int(data["scale_bits"]),
            chain_bits=tuple(int(b) for b in data["chain_bits"]),
            special_bits=int(data["special_bits"]),
            sigma=float(data["sigma"]),
            name=name,
        )

    def required_levels(self, degree: int) -> int:
        """Chain length needed by the iterative protocol for a degree-``degree`` polynomial."""
        return 3 + math.ceil(math.log2(degree + 1))

    @cached_property
    def tables(self) -> "NttTables":
        return NttTables.build(self.ring_dim, list(self.moduli) + [self.special_modulus])


@dataclass
class NttTables:
    """Twiddle tables for every prime of the chain plus the special prime (last row)."""

    ring_dim: int
    moduli: np.ndarray
    psi_rev: np.ndarray
    psi_inv_rev: np.ndarray
    n_inv: np.ndarray
    psi: list[int] = field(default_factory=list)

    @classmethod
    def build(cls, n: int, moduli: Sequence[int]) -> "NttTables":
        bits = n.bit_length() - 1
        rev = [_bit_reverse(i, bits) for i in range(n)]
        psi_rev = np.empty((len(moduli), n), dtype=np.uint64)
        psi_inv_rev = np.empty((len(moduli), n), dtype=np.uint64)
        psis = []
        for row, q in enumerate(moduli):
            g = primitive_root_2n(q, n)
            g_inv = pow(g, -1, q)
            psis.append(g)
            pw = [1] * n
            pw_inv = [1] * n
            for i in range(1, n):
                pw[i] = pw[i - 1] * g % q
                pw_inv[i] = pw_inv[i - 1] * g_inv % q
            psi_rev[row] = [pw[rev[i]] for i in range(n)]
            psi_inv_rev[row] = [pw_inv[rev[i]] for i in range(n)]
        n_inv = np.array([pow(n, -1, q) for q in moduli], dtype=np.uint64)
        return cls(n, np.array(moduli, dtype=np.uint64), psi_rev, psi_inv_rev, n_inv, psis)


def _preset_path(name: str):
    return resources.files("securebayes.he").joinpath("presets").joinpath(f"{name}.json")


PRESET_NAMES = ("full", "desk", "tiny")


def load_preset(name_or_path: str) -> HeParams:
    """Load a named preset (``full``, ``desk``, ``tiny``) or a JSON preset file."""
    if name_or_path in PRESET_NAMES:
        data = json.loads(_preset_path(name_or_path).read_text())
        return HeParams.from_json(data, name=name_or_path)
    try:
        with open(name_or_path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ParameterError(f"cannot read preset {name_or_path!r}: {exc}") from exc
    return HeParams.from_json(data, name=str(name_or_path))
