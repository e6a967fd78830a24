"""Exact modular arithmetic over power-of-two cyclotomic rings.

Provides NTT-friendly prime search, the negacyclic number-theoretic
transform, residue-number-system decomposition/recombination, and seeded
cryptographic sampling. Everything here is a pure function of its inputs;
polynomials are value-semantic (operations return new objects).
"""

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import _kernels

MAX_MODULUS_BITS = 62

_MR_BASES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37)


class RingError(ValueError):
    pass


def is_prime(n: int) -> bool:
    """Deterministic Miller-Rabin, valid for all n < 3.3e24 (covers 64 bits)."""
    if n < 2:
        return False
    for p in _MR_BASES:
        if n % p == 0:
            return n == p
    d = n - 1
    r = 0
    while d % 2 == 0:
        d //= 2
        r += 1
    for a in _MR_BASES:
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(r - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


def find_ntt_prime(bit_length: int, n: int, exclude=()) -> int:
    """Largest prime with exactly `bit_length` bits that is 1 mod 2n.

    Such primes admit a primitive 2n-th root of unity, as required by the
    negacyclic NTT at ring degree n.
    """
    if not (2 <= bit_length <= MAX_MODULUS_BITS):
        raise RingError(f"bit length {bit_length} outside [2, {MAX_MODULUS_BITS}]")
    if n < 1 or n & (n - 1):
        raise RingError("ring degree must be a power of two")
    step = 2 * n
    hi = (1 << bit_length) - 1
    lo = 1 << (bit_length - 1)
    cand = hi - (hi - 1) % step
    excl = set(exclude)
    while cand >= lo:
        if cand not in excl and is_prime(cand):
            return cand
        cand -= step
    raise RingError(f"no NTT prime with {bit_length} bits for degree {n}")


def _bit_reverse(x: int, bits: int) -> int:
    r = 0
    for _ in range(bits):
        r = (r << 1) | (x & 1)
        x >>= 1
    return r


class Modulus:
    """A single NTT-friendly prime with precomputed transform tables.

    Tables: `root_powers` / `inv_root_powers` hold the 2n-th root powers in
    bit-reversed order and Montgomery form, as consumed by the kernels.
    """

    def __init__(self, value: int, n: int):
        if value.bit_length() > MAX_MODULUS_BITS:
            raise RingError("modulus exceeds 62 bits")
        if not is_prime(value):
            raise RingError(f"{value} is not prime")
        if (value - 1) % (2 * n) != 0:
            raise RingError(f"{value} is not 1 mod {2 * n}")
        self.value = value
        self.n = n
        self.n_inverse = pow(n, -1, value)
        self._r = (1 << 64) % value
        self._r2 = (1 << 128) % value
        self._ninv = (-pow(value, -1, 1 << 64)) % (1 << 64)
        psi = self._find_primitive_root()
        self.root = psi
        logn = n.bit_length() - 1
        rev = [_bit_reverse(i, logn) for i in range(n)]
        psi_pows = [1] * n
        for i in range(1, n):
            psi_pows[i] = psi_pows[i - 1] * psi % value
        ipsi = pow(psi, -1, value)
        ipsi_pows = [1] * n
        for i in range(1, n):
            ipsi_pows[i] = ipsi_pows[i - 1] * ipsi % value
        r = self._r
        self.root_powers = np.array(
            [psi_pows[rev[i]] * r % value for i in range(n)], dtype=np.uint64
        )
        self.inv_root_powers = np.array(
            [ipsi_pows[rev[i]] * r % value for i in range(n)], dtype=np.uint64
        )
        self._n_inv_mont = np.uint64(self.n_inverse * r % value)

    def _find_primitive_root(self) -> int:
        p, n = self.value, self.n
        for g in range(2, 1000):
            psi = pow(g, (p - 1) // (2 * n), p)
            if n == 1:
                if psi == p - 1:
                    return psi
            elif pow(psi, n, p) == p - 1:
                return psi
        raise RingError(f"no primitive 2*{n}-th root found mod {p}")

    def __repr__(self):
        return f"Modulus({self.value}, n={self.n})"

    def __eq__(self, other):
        return isinstance(other, Modulus) and (self.value, self.n) == (other.value, other.n)

    def __hash__(self):
        return hash((self.value, self.n))


_MODULUS_CACHE: dict = {}


def get_modulus(value: int, n: int) -> Modulus:
    """Shared Modulus instances; table construction is costly at large n."""
    key = (value, n)
    m = _MODULUS_CACHE.get(key)
    if m is None:
        m = _MODULUS_CACHE[key] = Modulus(value, n)
    return m


class RnsBase:
    """Ordered co-prime moduli with CRT reconstruction constants.

    By convention the last modulus is the key prime; the product of all
    moduli is the full coefficient modulus q.
    """

    def __init__(self, moduli, n: int):
        values = [m.value if isinstance(m, Modulus) else int(m) for m in moduli]
        if len(set(values)) != len(values):
            raise RingError("RNS moduli must be distinct")
        self.moduli = tuple(get_modulus(v, n) for v in values)
        self.n = n
        self.q = 1
        for v in values:
            self.q *= v
        # punctured_products[i] = (q/p_i) * ((q/p_i)^-1 mod p_i), the CRT basis
        self.punctured_products = []
        for v in values:
            qi = self.q // v
            self.punctured_products.append(qi * pow(qi, -1, v))

    @property
    def values(self):
        return tuple(m.value for m in self.moduli)

    def __len__(self):
        return len(self.moduli)

    def product(self, count=None) -> int:
        """Product of the first `count` moduli (full q by default)."""
        if count is None:
            return self.q
        p = 1
        for m in self.moduli[:count]:
            p *= m.value
        return p

    def __repr__(self):
        return f"RnsBase({self.values}, n={self.n})"


COEFF = "coeff"
EVAL = "eval"


@dataclass
class RnsPoly:
    """Polynomial in residue form: coeffs[residue, coefficient index].

    `domain` is `coeff` for coefficient representation and `eval` for the
    NTT (bit-reversed evaluation) representation; all residues share it.
    """

    coeffs: np.ndarray
    moduli: tuple
    domain: str = COEFF

    def __post_init__(self):
        assert self.coeffs.dtype == np.uint64
        assert self.coeffs.ndim == 2
        assert self.coeffs.shape[0] == len(self.moduli)

    @property
    def n(self) -> int:
        return self.coeffs.shape[1]

    @property
    def k(self) -> int:
        return self.coeffs.shape[0]

    def copy(self) -> "RnsPoly":
        return RnsPoly(self.coeffs.copy(), self.moduli, self.domain)

    @classmethod
    def zero(cls, moduli, n, domain=COEFF) -> "RnsPoly":
        return cls(np.zeros((len(moduli), n), dtype=np.uint64), tuple(moduli), domain)


def _check_same(a: RnsPoly, b: RnsPoly):
    if a.moduli != b.moduli or a.domain != b.domain:
        raise RingError("operands have mismatched moduli or domain")


def poly_add(a: RnsPoly, b: RnsPoly) -> RnsPoly:
    _check_same(a, b)
    out = np.empty_like(a.coeffs)
    for i, m in enumerate(a.moduli):
        _kernels.vec_addmod(out[i], a.coeffs[i], b.coeffs[i], np.uint64(m.value))
    return RnsPoly(out, a.moduli, a.domain)


def poly_sub(a: RnsPoly, b: RnsPoly) -> RnsPoly:
    _check_same(a, b)
    out = np.empty_like(a.coeffs)
    for i, m in enumerate(a.moduli):
        _kernels.vec_submod(out[i], a.coeffs[i], b.coeffs[i], np.uint64(m.value))
    return RnsPoly(out, a.moduli, a.domain)


def poly_neg(a: RnsPoly) -> RnsPoly:
    out = np.empty_like(a.coeffs)
    for i, m in enumerate(a.moduli):
        p = np.uint64(m.value)
        _kernels.vec_submod(out[i], np.zeros(a.n, dtype=np.uint64), a.coeffs[i], p)
    return RnsPoly(out, a.moduli, a.domain)


def poly_mul_pointwise(a: RnsPoly, b: RnsPoly) -> RnsPoly:
    """Dyadic product; both operands must be in the evaluation domain."""
    _check_same(a, b)
    if a.domain != EVAL:
        raise RingError("pointwise product requires evaluation domain")
    out = np.empty_like(a.coeffs)
    for i, m in enumerate(a.moduli):
        _kernels.vec_mulmod(
            out[i], a.coeffs[i], b.coeffs[i],
            np.uint64(m.value), np.uint64(m._ninv), np.uint64(m._r2),
        )
    return RnsPoly(out, a.moduli, EVAL)


def poly_mul_scalar(a: RnsPoly, scalars) -> RnsPoly:
    """Multiply residue i by scalars[i] (one int, reduced per residue, is ok)."""
    if isinstance(scalars, int):
        scalars = [scalars % m.value for m in a.moduli]
    out = np.empty_like(a.coeffs)
    for i, m in enumerate(a.moduli):
        s_mont = np.uint64(scalars[i] % m.value * m._r % m.value)
        _kernels.vec_mulmod_scalar(
            out[i], a.coeffs[i], s_mont, np.uint64(m.value), np.uint64(m._ninv)
        )
    return RnsPoly(out, a.moduli, a.domain)


def ntt_forward(p: RnsPoly) -> RnsPoly:
    if p.domain == EVAL:
        raise RingError("double transform: polynomial already in evaluation domain")
    out = p.coeffs.copy()
    for i, m in enumerate(p.moduli):
        _kernels.ntt_forward_inplace(
            out[i], m.root_powers, np.uint64(m.value), np.uint64(m._ninv)
        )
    return RnsPoly(out, p.moduli, EVAL)


def ntt_inverse(p: RnsPoly) -> RnsPoly:
    if p.domain == COEFF:
        raise RingError("double transform: polynomial already in coefficient domain")
    out = p.coeffs.copy()
    for i, m in enumerate(p.moduli):
        _kernels.ntt_inverse_inplace(
            out[i], m.inv_root_powers, np.uint64(m.value), np.uint64(m._ninv),
            m._n_inv_mont,
        )
    return RnsPoly(out, p.moduli, COEFF)


def poly_mul(a: RnsPoly, b: RnsPoly) -> RnsPoly:
    """Full negacyclic product of coefficient-domain polynomials."""
    return ntt_inverse(poly_mul_pointwise(ntt_forward(a), ntt_forward(b)))


def apply_automorphism(p: RnsPoly, elt: int) -> RnsPoly:
    """Substitute X -> X^elt, for odd elt mod 2n (a Galois automorphism).

    Coefficient i moves to i*elt mod 2n, negated when it crosses n.
    Requires the coefficient domain.
    """
    if p.domain != COEFF:
        raise RingError("automorphism requires coefficient domain")
    n = p.n
    if elt % 2 == 0 or not (0 < elt < 2 * n):
        raise RingError("automorphism element must be odd in (0, 2n)")
    idx = (np.arange(n, dtype=np.int64) * elt) % (2 * n)
    wrap = idx >= n
    dest = np.where(wrap, idx - n, idx)
    out = np.empty_like(p.coeffs)
    for i, m in enumerate(p.moduli):
        row = np.zeros(n, dtype=np.uint64)
        src = p.coeffs[i]
        neg = (np.uint64(m.value) - src) % np.uint64(m.value)
        row[dest] = np.where(wrap, neg, src)
        out[i] = row
    return RnsPoly(out, p.moduli, COEFF)


# ---------------------------------------------------------------------------
# RNS <-> integer conversion


def rns_decompose(coeffs, base: RnsBase, count=None) -> RnsPoly:
    """Reduce big-integer coefficients into the first `count` residues."""
    moduli = base.moduli[:count] if count else base.moduli
    q = base.product(len(moduli))
    rows = []
    for m in moduli:
        p = m.value
        row = np.empty(len(coeffs), dtype=np.uint64)
        for j, c in enumerate(coeffs):
            c = int(c)
            if not 0 <= c < q:
                raise RingError("coefficient out of range for RNS base")
            row[j] = c % p
        rows.append(row)
    return RnsPoly(np.stack(rows), tuple(moduli), COEFF)


def crt_recombine(p: RnsPoly, base: RnsBase) -> list:
    """Coefficients as integers in [0, q), q the product of p's moduli."""
    if p.domain != COEFF:
        raise RingError("CRT recombination requires coefficient domain")
    values = [m.value for m in p.moduli]
    q = 1
    for v in values:
        q *= v
    # punctured products for exactly the residues present
    weights = []
    for v in values:
        qi = q // v
        weights.append(qi * pow(qi, -1, v) % q)
    cols = [[int(x) for x in p.coeffs[i]] for i in range(p.k)]
    out = []
    for j in range(p.n):
        acc = 0
        for i, w in enumerate(weights):
            acc += cols[i][j] * w
        out.append(acc % q)
    return out


# ---------------------------------------------------------------------------
# Seeded sampling

XOF_NAME = "blake2b-ctr"  # recorded in serialized params / protocol handshake

_BLOCK = 64


def _coerce_seed(seed) -> bytes:
    """Map ints, strings, byte strings, and nested tuples to 32 bytes."""
    if isinstance(seed, int):
        return hashlib.blake2b(
            seed.to_bytes((max(seed.bit_length(), 1) + 7) // 8, "little",
                          signed=False) if seed >= 0 else repr(seed).encode(),
            digest_size=32,
        ).digest()
    if isinstance(seed, str):
        return hashlib.blake2b(seed.encode(), digest_size=32).digest()
    if isinstance(seed, (tuple, list)):
        h = hashlib.blake2b(digest_size=32)
        for part in seed:
            h.update(_coerce_seed(part))
        return h.digest()
    seed = bytes(seed)
    if len(seed) == 32:
        return seed
    return hashlib.blake2b(seed, digest_size=32).digest()


class SeededSampler:
    """Deterministic byte stream: blake2b over (seed, block counter).

    Identical (seed, position) always yields identical bytes; `position`
    advances explicitly as bytes are consumed.
    """

    def __init__(self, seed, position: int = 0):
        self.seed = _coerce_seed(seed)
        self.position = int(position)

    def child(self, label) -> "SeededSampler":
        """Independent stream derived from (seed, label)."""
        if isinstance(label, str):
            label = label.encode()
        seed = hashlib.blake2b(self.seed + bytes(label), digest_size=32).digest()
        return SeededSampler(seed)

    def _block(self, index: int) -> bytes:
        return hashlib.blake2b(
            self.seed + index.to_bytes(8, "little"), digest_size=_BLOCK
        ).digest()

    def take(self, nbytes: int) -> np.ndarray:
        """Next `nbytes` of the stream as a uint8 array."""
        start = self.position
        end = start + nbytes
        first = start // _BLOCK
        last = (end + _BLOCK - 1) // _BLOCK
        buf = b"".join(self._block(i) for i in range(first, last))
        off = start - first * _BLOCK
        self.position = end
        return np.frombuffer(buf[off:off + nbytes], dtype=np.uint8)


def _spread(values: np.ndarray, moduli) -> RnsPoly:
    """Represent small signed integers under every modulus (x mod p)."""
    rows = []
    for m in moduli:
        rows.append((values % m.value).astype(np.uint64))
    return RnsPoly(np.stack(rows), tuple(moduli), COEFF)


def sample_ternary(sampler: SeededSampler, moduli, n: int) -> RnsPoly:
    """Uniform draws from {-1, 0, 1}, rejection-sampled to avoid bias."""
    out = np.empty(n, dtype=np.int64)
    filled = 0
    while filled < n:
        raw = sampler.take(2 * (n - filled) + 16)
        ok = raw < 255  # 255 = 85*3, so b % 3 is unbiased below it
        vals = raw[ok][: n - filled].astype(np.int64) % 3 - 1
        out[filled:filled + len(vals)] = vals
        filled += len(vals)
    return _spread(out, moduli)


def sample_error(sampler: SeededSampler, moduli, n: int, sigma: float) -> RnsPoly:
    """Centered-binomial approximation of a discrete Gaussian of width sigma.

    Sum of k coin-pair differences with k = round(2*sigma^2); values are
    truncated at the 6*sigma cutoff.
    """
    if sigma <= 0:
        raise RingError("sigma must be positive")
    k = max(1, round(2 * sigma * sigma))
    nbytes = (k + 7) // 8
    a = np.unpackbits(sampler.take(nbytes * n)).reshape(n, nbytes * 8)[:, :k]
    b = np.unpackbits(sampler.take(nbytes * n)).reshape(n, nbytes * 8)[:, :k]
    vals = a.sum(axis=1).astype(np.int64) - b.sum(axis=1).astype(np.int64)
    cutoff = int(6 * sigma)
    np.clip(vals, -cutoff, cutoff, out=vals)
    return _spread(vals, moduli)


def sample_uniform(sampler: SeededSampler, moduli, n: int) -> RnsPoly:
    """Independent uniform residues in [0, p) per modulus."""
    rows = []
    for m in moduli:
        p = m.value
        limit = (1 << 64) - (1 << 64) % p
        row = np.empty(n, dtype=np.uint64)
        filled = 0
        while filled < n:
            raw = sampler.take(8 * (n - filled) + 64)
            words = raw[: len(raw) - len(raw) % 8].view(np.uint64)
            ok = words < limit
            vals = words[ok][: n - filled] % np.uint64(p)
            row[filled:filled + len(vals)] = vals
            filled += len(vals)
        rows.append(row)
    return RnsPoly(np.stack(rows), tuple(moduli), COEFF)


def sample_uniform_signed(sampler: SeededSampler, bound: int, n: int) -> np.ndarray:
    """Uniform integers in [-bound, bound], as a plain int64 array."""
    if bound < 0:
        raise RingError("bound must be nonnegative")
    span = 2 * bound + 1
    limit = (1 << 64) - (1 << 64) % span
    out = np.empty(n, dtype=np.int64)
    filled = 0
    while filled < n:
        raw = sampler.take(8 * (n - filled) + 64)
        words = raw[: len(raw) - len(raw) % 8].view(np.uint64)
        ok = words < limit
        vals = (words[ok][: n - filled] % np.uint64(span)).astype(np.int64) - bound
        out[filled:filled + len(vals)] = vals
        filled += len(vals)
    return out
