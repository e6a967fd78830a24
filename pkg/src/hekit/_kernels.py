"""JIT-compiled modular arithmetic kernels.

All kernels operate on uint64 arrays with moduli below 2^62, so that a
64x64-bit product can be handled through 32-bit limb splitting and
Montgomery reduction without multi-precision arithmetic.
"""

import numba as nb
import numpy as np

U64 = nb.uint64


@nb.njit(U64(U64, U64), cache=True, inline="always")
def _mulhi(a, b):
    a_lo = a & U64(0xFFFFFFFF)
    a_hi = a >> U64(32)
    b_lo = b & U64(0xFFFFFFFF)
    b_hi = b >> U64(32)
    lo_lo = a_lo * b_lo
    hi_lo = a_hi * b_lo
    lo_hi = a_lo * b_hi
    cross = (lo_lo >> U64(32)) + (hi_lo & U64(0xFFFFFFFF)) + lo_hi
    return a_hi * b_hi + (hi_lo >> U64(32)) + (cross >> U64(32))


@nb.njit(U64(U64, U64, U64, U64), cache=True, inline="always")
def _mont_mul(a, b, p, ninv):
    # a*b*2^-64 mod p; ninv = -p^-1 mod 2^64; requires a, b < p < 2^62.
    t_hi = _mulhi(a, b)
    t_lo = a * b
    m = t_lo * ninv
    mp_hi = _mulhi(m, p)
    carry = U64(1) if t_lo != U64(0) else U64(0)
    r = t_hi + mp_hi + carry
    if r >= p:
        r -= p
    return r


@nb.njit((U64[:], U64[:], U64, U64), cache=True)
def ntt_forward_inplace(a, psi_rev_mont, p, ninv):
    """Cooley-Tukey negacyclic NTT: standard order in, bit-reversed out.

    psi_rev_mont[i] holds psi^bitrev(i) * 2^64 mod p for the 2N-th root psi.
    """
    n = a.shape[0]
    t = n
    m = 1
    while m < n:
        t //= 2
        for i in range(m):
            j1 = 2 * i * t
            s = psi_rev_mont[m + i]
            for j in range(j1, j1 + t):
                u = a[j]
                v = _mont_mul(a[j + t], s, p, ninv)
                ap = u + v
                if ap >= p:
                    ap -= p
                am = u + p - v
                if am >= p:
                    am -= p
                a[j] = ap
                a[j + t] = am
        m *= 2


@nb.njit((U64[:], U64[:], U64, U64, U64), cache=True)
def ntt_inverse_inplace(a, ipsi_rev_mont, p, ninv, n_inv_mont):
    """Gentleman-Sande inverse: bit-reversed order in, standard order out."""
    n = a.shape[0]
    t = 1
    m = n
    while m > 1:
        j1 = 0
        h = m // 2
        for i in range(h):
            s = ipsi_rev_mont[h + i]
            for j in range(j1, j1 + t):
                u = a[j]
                v = a[j + t]
                ap = u + v
                if ap >= p:
                    ap -= p
                a[j] = ap
                a[j + t] = _mont_mul(u + p - v, s, p, ninv)
            j1 += 2 * t
        t *= 2
        m = h
    for j in range(n):
        a[j] = _mont_mul(a[j], n_inv_mont, p, ninv)


@nb.njit((U64[:], U64[:], U64[:], U64, U64, U64), cache=True)
def vec_mulmod(out, a, b, p, ninv, r2):
    # out = a*b mod p via two Montgomery passes; r2 = 2^128 mod p.
    for i in range(a.shape[0]):
        out[i] = _mont_mul(_mont_mul(a[i], b[i], p, ninv), r2, p, ninv)


@nb.njit((U64[:], U64[:], U64, U64, U64), cache=True)
def vec_mulmod_scalar(out, a, s_mont, p, ninv):
    # out = a*s mod p with the scalar premultiplied by 2^64 mod p.
    for i in range(a.shape[0]):
        out[i] = _mont_mul(a[i], s_mont, p, ninv)


@nb.njit((U64[:], U64[:], U64[:], U64, U64, U64), cache=True)
def vec_mac(acc, a, b, p, ninv, r2):
    # acc += a*b mod p.
    for i in range(a.shape[0]):
        v = _mont_mul(_mont_mul(a[i], b[i], p, ninv), r2, p, ninv)
        s = acc[i] + v
        if s >= p:
            s -= p
        acc[i] = s


@nb.njit((U64[:], U64[:], U64[:], U64), cache=True)
def vec_addmod(out, a, b, p):
    for i in range(a.shape[0]):
        s = a[i] + b[i]
        if s >= p:
            s -= p
        out[i] = s


@nb.njit((U64[:], U64[:], U64[:], U64), cache=True)
def vec_submod(out, a, b, p):
    for i in range(a.shape[0]):
        s = a[i] + p - b[i]
        if s >= p:
            s -= p
        out[i] = s
