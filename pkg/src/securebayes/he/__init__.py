"""Leveled approximate homomorphic encryption with a lattice and a mock backend."""
from .backend import Ciphertext, EvalKeys, HeBackend, KeyTrio, OpCounter, Plaintext, PublicKey, SecretKey
from .errors import (
    AlignmentError,
    DepthExhaustedError,
    EncodeError,
    HeError,
    HeKeyError,
    ParameterError,
    RescaleRequiredError,
)
from .lattice import ERROR_BUDGETS, LatticeBackend
from .mock import MockBackend
from .params import HeParams, load_preset

BACKEND_KINDS = ("lattice", "mock", "exact")


def make_backend(kind: str, params: HeParams, seed: int | None = None) -> HeBackend:
    """``lattice``, ``mock`` (noisy cleartext) or ``exact`` (noise-free cleartext)."""
    if kind == "lattice":
        return LatticeBackend(params, seed)
    if kind == "mock":
        return MockBackend(params, seed)
    if kind == "exact":
        return MockBackend(params, seed, noise_std=0.0)
    raise ParameterError(f"unknown backend {kind!r}; choose from {BACKEND_KINDS}")


__all__ = [
    "AlignmentError", "Ciphertext", "ERROR_BUDGETS", "DepthExhaustedError", "EncodeError", "EvalKeys", "HeBackend",
    "HeError", "HeKeyError", "HeParams", "KeyTrio", "LatticeBackend", "MockBackend", "OpCounter",
    "ParameterError", "Plaintext", "PublicKey", "RescaleRequiredError", "SecretKey",
    "load_preset", "make_backend",
]
