"""Pure numpy fallback for the modular arithmetic kernels.

Every function operates on 2-D ``uint64`` arrays of shape ``(limbs, n)`` with
one modulus per row. Moduli must be below 2**56 so that the float64 quotient
estimate in :func:`mulmod_rows` is off by at most a few dozen.
"""
import numpy as np

BACKEND = "numpy"


def _mulmod(a, b, q):
    est = np.floor(a.astype(np.float64) * b.astype(np.float64) / q.astype(np.float64))
    r = (a * b - est.astype(np.uint64) * q).view(np.int64)
    return np.mod(r, q.view(np.int64)).view(np.uint64)


def mulmod_rows(a, b, moduli):
    """Row-wise ``a * b mod q``."""
    q = np.asarray(moduli, dtype=np.uint64)[:, None]
    return _mulmod(np.ascontiguousarray(a), np.ascontiguousarray(b), q)


def ntt_forward_rows(a, moduli, psi_rev):
    """In-place negacyclic NTT (natural order in, bit-reversed order out)."""
    limbs, n = a.shape
    for row in range(limbs):
        q = np.uint64(moduli[row])
        qa = np.full(1, q, dtype=np.uint64)
        x = a[row]
        m, t = 1, n
        while m < n:
            t //= 2
            blocks = x.reshape(m, 2, t)
            w = psi_rev[row, m:2 * m][:, None]
            u = blocks[:, 0, :].copy()
            v = _mulmod(blocks[:, 1, :], np.broadcast_to(w, (m, t)), qa)
            s = u + v
            blocks[:, 0, :] = np.where(s >= q, s - q, s)
            blocks[:, 1, :] = np.where(u >= v, u - v, u + q - v)
            m *= 2
    return a


def ntt_inverse_rows(a, moduli, psi_inv_rev, n_inv):
    """In-place inverse of :func:`ntt_forward_rows`, including the 1/n factor."""
    limbs, n = a.shape
    for row in range(limbs):
        q = np.uint64(moduli[row])
        qa = np.full(1, q, dtype=np.uint64)
        x = a[row]
        m, t = n, 1
        while m > 1:
            h = m // 2
            blocks = x.reshape(h, 2, t)
            w = psi_inv_rev[row, h:m][:, None]
            u = blocks[:, 0, :].copy()
            v = blocks[:, 1, :].copy()
            s = u + v
            blocks[:, 0, :] = np.where(s >= q, s - q, s)
            diff = np.where(u >= v, u - v, u + q - v)
            blocks[:, 1, :] = _mulmod(diff, np.broadcast_to(w, (h, t)), qa)
            t *= 2
            m = h
        x[:] = _mulmod(x, np.full(n, n_inv[row], dtype=np.uint64), qa)
    return a
