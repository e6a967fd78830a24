"""BFV somewhat-homomorphic encryption over an RNS ciphertext modulus.

Implements asymmetric encryption with a key-prime modulus switch, exact
decryption with CRT recombination and scaled rounding, homomorphic
add / plaintext-multiply / slot rotation via hybrid key switching, and an
invariant-noise budget meter.

Noise calibration: in addition to the width-`sigma` error of the RLWE
encryption, a deliberate uniform noise pad is added to fresh ciphertexts
(`enc_pad_bits`) and to the key-switching keys (`ks_pad_bits`). The pads
are real noise, measured by the meter and consumed from the budget; their
default magnitudes are fitted so the budgets of the shipped parameter sets
match this toolkit's reference noise tables. Set both to a large negative
value to disable padding.
"""

import hashlib
import json
import struct
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels, ring
from .ring import (
    COEFF,
    EVAL,
    RingError,
    RnsBase,
    RnsPoly,
    SeededSampler,
    apply_automorphism,
    get_modulus,
    ntt_forward,
    ntt_inverse,
    poly_add,
    poly_mul_pointwise,
    poly_mul_scalar,
    poly_neg,
    poly_sub,
)

MAGIC = b"CHOC"
FORMAT_VERSION = 1
WORD_BYTES = 8  # w in the ciphertext-size accounting
CT_HEADER_BYTES = 4 + 2 + 32 + 1 + 1 + 1

# Fitted so the shipped parameter sets reproduce the reference noise tables
# (see scripts/calibrate_noise.py); both pads scale with t.
DEFAULT_ENC_PAD_BITS = 6.5
DEFAULT_KS_PAD_BITS = 1.5


class BfvError(ValueError):
    pass


class NoiseOverflowError(BfvError):
    pass


# ---------------------------------------------------------------------------
# Parameters


@dataclass(frozen=True)
class HEParams:
    """Full scheme parameter set; the last modulus is the key prime."""

    n: int
    moduli: tuple
    t: int
    sigma: float = 3.2
    enc_pad_bits: float = DEFAULT_ENC_PAD_BITS
    ks_pad_bits: float = DEFAULT_KS_PAD_BITS
    security_label: str = "custom"

    def __post_init__(self):
        n = self.n
        if n & (n - 1) or not (2 ** 11 <= n <= 2 ** 15):
            raise BfvError("polynomial degree must be a power of two in [2^11, 2^15]")
        if len(self.moduli) < 2:
            raise BfvError("need at least one ciphertext modulus plus the key prime")
        if (self.t - 1) % (2 * n) != 0 or not ring.is_prime(self.t):
            raise BfvError("plaintext modulus must be a prime equal to 1 mod 2N")

    @property
    def k(self) -> int:
        return len(self.moduli)

    @property
    def q_full(self) -> int:
        p = 1
        for v in self.moduli:
            p *= v
        return p

    @property
    def q_ct(self) -> int:
        """Product of the k-1 ciphertext moduli (key prime excluded)."""
        p = 1
        for v in self.moduli[:-1]:
            p *= v
        return p

    @property
    def delta(self) -> int:
        return self.q_ct // self.t

    @property
    def slot_count(self) -> int:
        return self.n

    @property
    def params_id(self) -> bytes:
        return _params_id(self)

    def describe(self) -> dict:
        return {
            "n": self.n,
            "moduli": list(self.moduli),
            "modulus_bits": [v.bit_length() for v in self.moduli],
            "t": self.t,
            "t_bits": self.t.bit_length(),
            "sigma": self.sigma,
            "enc_pad_bits": self.enc_pad_bits,
            "ks_pad_bits": self.ks_pad_bits,
            "security_label": self.security_label,
            "xof": ring.XOF_NAME,
            "ciphertext_bytes": ciphertext_size(self),
        }


_DERIVED_CACHE: dict = {}


def _derived(params: HEParams):
    key = (params.n, params.moduli, params.t)
    d = _DERIVED_CACHE.get(key)
    if d is None:
        base = RnsBase(params.moduli, params.n)
        t_mod = get_modulus(params.t, params.n)
        d = _DERIVED_CACHE[key] = {"base": base, "t_mod": t_mod}
    return d


def _params_id(params: HEParams) -> bytes:
    blob = json.dumps(
        {
            "n": params.n,
            "moduli": list(params.moduli),
            "t": params.t,
            "sigma": params.sigma,
            "enc_pad_bits": params.enc_pad_bits,
            "ks_pad_bits": params.ks_pad_bits,
            "xof": ring.XOF_NAME,
        },
        sort_keys=True,
    ).encode()
    return hashlib.sha256(blob).digest()


def rns_base(params: HEParams) -> RnsBase:
    return _derived(params)["base"]


def custom_params(n, residue_bits, t_bits, sigma=3.2,
                  enc_pad_bits=DEFAULT_ENC_PAD_BITS,
                  ks_pad_bits=DEFAULT_KS_PAD_BITS,
                  label="custom") -> HEParams:
    """Parameters from bit widths; residues are the largest NTT primes."""
    moduli = []
    for b in residue_bits:
        moduli.append(ring.find_ntt_prime(b, n, exclude=moduli))
    t = ring.find_ntt_prime(t_bits, n, exclude=moduli)
    return HEParams(n=n, moduli=tuple(moduli), t=t, sigma=sigma,
                    enc_pad_bits=enc_pad_bits, ks_pad_bits=ks_pad_bits,
                    security_label=label)


_PRESETS = {
    "A": dict(n=8192, residue_bits=(58, 58, 59), t_bits=23),
    "B": dict(n=4096, residue_bits=(36, 36, 37), t_bits=18),
}


def make_params(preset: str = "A", **overrides) -> HEParams:
    """Shipped parameter sets A and B (128-bit-secure selections)."""
    preset = preset.upper()
    if preset not in _PRESETS:
        raise BfvError(f"unknown preset {preset!r}; expected one of {sorted(_PRESETS)}")
    cfg = dict(_PRESETS[preset])
    t_bits = overrides.pop("t_bits", cfg["t_bits"])
    return custom_params(cfg["n"], cfg["residue_bits"], t_bits,
                         label=preset, **overrides)


# ---------------------------------------------------------------------------
# Batched slot encoding


_INDEX_MAP_CACHE: dict = {}


def _index_map(n: int) -> np.ndarray:
    imap = _INDEX_MAP_CACHE.get(n)
    if imap is not None:
        return imap
    logn = n.bit_length() - 1
    m = 2 * n
    imap = np.empty(n, dtype=np.int64)
    pos = 1
    for i in range(n // 2):
        imap[i] = ring._bit_reverse((pos - 1) // 2, logn)
        imap[i + n // 2] = ring._bit_reverse((m - pos - 1) // 2, logn)
        pos = pos * 3 % m
    _INDEX_MAP_CACHE[n] = imap
    return imap


@dataclass
class Plaintext:
    """Vector of integers mod t. Slot encoding is the batched CRT layout;
    coefficient encoding stores the values directly as polynomial
    coefficients."""

    values: np.ndarray
    encoding: str = "slot"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.int64)

    def __len__(self):
        return len(self.values)


def _slots_to_poly(params: HEParams, values: np.ndarray) -> np.ndarray:
    """Interpolate slot values into plaintext polynomial coefficients."""
    n, t = params.n, params.t
    t_mod = _derived(params)["t_mod"]
    buf = np.zeros(n, dtype=np.uint64)
    vals = np.asarray(values, dtype=np.int64) % t
    buf[_index_map(n)[: len(vals)]] = vals.astype(np.uint64)
    poly = RnsPoly(buf[None, :].copy(), (t_mod,), EVAL)
    return ntt_inverse(poly).coeffs[0].astype(np.int64)


def _poly_to_slots(params: HEParams, coeffs: np.ndarray) -> np.ndarray:
    n, t = params.n, params.t
    t_mod = _derived(params)["t_mod"]
    row = (np.asarray(coeffs, dtype=np.int64) % t).astype(np.uint64)
    poly = RnsPoly(row[None, :].copy(), (t_mod,), COEFF)
    buf = ntt_forward(poly).coeffs[0]
    return buf[_index_map(n)].astype(np.int64)


def encode(params: HEParams, pt: Plaintext) -> np.ndarray:
    """Plaintext polynomial coefficients (mod t) for either encoding."""
    vals = pt.values
    if len(vals) > params.n:
        raise BfvError("message too long")
    if pt.encoding == "slot":
        return _slots_to_poly(params, vals)
    coeffs = np.zeros(params.n, dtype=np.int64)
    coeffs[: len(vals)] = vals % params.t
    return coeffs


def decode(params: HEParams, coeffs: np.ndarray, encoding="slot") -> Plaintext:
    if encoding == "slot":
        return Plaintext(_poly_to_slots(params, coeffs), "slot")
    return Plaintext(np.asarray(coeffs, dtype=np.int64) % params.t, "coeff")


@dataclass
class PreparedPlaintext:
    """Plaintext pre-encoded and NTT-transformed per residue for fast reuse."""

    params_id: bytes
    coeffs_mod_t: np.ndarray
    ntt_rows: dict  # residue count -> RnsPoly in evaluation domain


def prepare_plaintext(params: HEParams, pt: Plaintext) -> PreparedPlaintext:
    coeffs = encode(params, pt)
    return PreparedPlaintext(params.params_id, coeffs, {})


def _prepared_ntt(params: HEParams, prep: PreparedPlaintext, active: int) -> RnsPoly:
    poly = prep.ntt_rows.get(active)
    if poly is None:
        base = rns_base(params)
        moduli = base.moduli[:active]
        # centered representative in (-t/2, t/2]: halves multiply noise while
        # leaving the mod-t product unchanged
        t = params.t
        centered = prep.coeffs_mod_t - np.where(prep.coeffs_mod_t > t // 2, t, 0)
        rows = np.stack([(centered % m.value).astype(np.uint64) for m in moduli])
        poly = ntt_forward(RnsPoly(rows, tuple(moduli), COEFF))
        prep.ntt_rows[active] = poly
    return poly


# ---------------------------------------------------------------------------
# Operation counters (thread-local, nestable)


class OpCounter:
    def __init__(self):
        self.counts = {}

    def __getitem__(self, name):
        return self.counts.get(name, 0)

    def total(self):
        return sum(self.counts.values())

    def __repr__(self):
        return f"OpCounter({self.counts})"


_TRACKERS = threading.local()


@contextmanager
def count_ops():
    """Count homomorphic operations performed on the current thread."""
    stack = getattr(_TRACKERS, "stack", None)
    if stack is None:
        stack = _TRACKERS.stack = []
    counter = OpCounter()
    stack.append(counter)
    try:
        yield counter
    finally:
        stack.remove(counter)


def _record(name: str):
    for counter in getattr(_TRACKERS, "stack", ()):
        counter.counts[name] = counter.counts.get(name, 0) + 1


# ---------------------------------------------------------------------------
# Ciphertext


@dataclass
class Ciphertext:
    """`s` component polynomials over the active ciphertext residues.

    `rotation_used` carries the cumulative windowed-rotation magnitude for
    redundancy-packed ciphertexts (bookkeeping for the packing layer).
    """

    components: list
    params_id: bytes
    rotation_used: int = 0

    @property
    def s(self) -> int:
        return len(self.components)

    @property
    def active_residues(self) -> int:
        return self.components[0].k

    @property
    def n(self) -> int:
        return self.components[0].n

    @property
    def domain(self) -> str:
        return self.components[0].domain

    def copy(self) -> "Ciphertext":
        return Ciphertext([c.copy() for c in self.components], self.params_id,
                          self.rotation_used)


def ciphertext_size(params: HEParams, s: int = 2, active: int = None) -> int:
    """Serialized payload bytes: w * N * s * (k-1); header excluded."""
    if active is None:
        active = params.k - 1
    return WORD_BYTES * params.n * s * active


def serialize_ciphertext(ct: Ciphertext) -> bytes:
    dom = 0 if ct.domain == COEFF else 1
    header = MAGIC + struct.pack("<H", FORMAT_VERSION) + ct.params_id
    header += struct.pack("<BBB", ct.s, ct.active_residues, dom)
    body = b"".join(
        comp.coeffs[i].astype("<u8").tobytes()
        for comp in ct.components
        for i in range(comp.k)
    )
    return header + body


def deserialize_ciphertext(data: bytes, params: HEParams) -> Ciphertext:
    if len(data) < CT_HEADER_BYTES:
        raise BfvError("short read: truncated ciphertext header")
    if data[:4] != MAGIC:
        raise BfvError("bad magic")
    version, = struct.unpack_from("<H", data, 4)
    if version != FORMAT_VERSION:
        raise BfvError(f"unsupported format version {version}")
    pid = data[6:38]
    if pid != params.params_id:
        raise BfvError("ciphertext was produced under different parameters")
    s, active, dom = struct.unpack_from("<BBB", data, 38)
    n = params.n
    expect = CT_HEADER_BYTES + WORD_BYTES * n * s * active
    if len(data) != expect:
        raise BfvError(f"short read: expected {expect} bytes, got {len(data)}")
    base = rns_base(params)
    moduli = base.moduli[:active]
    domain = COEFF if dom == 0 else EVAL
    comps = []
    off = CT_HEADER_BYTES
    for _ in range(s):
        rows = []
        for _ in range(active):
            rows.append(np.frombuffer(data, dtype="<u8", count=n, offset=off).copy())
            off += 8 * n
        comps.append(RnsPoly(np.stack(rows), tuple(moduli), domain))
    return Ciphertext(comps, pid)


# ---------------------------------------------------------------------------
# Keys


@dataclass
class KSKey:
    """Key-switch key: one (b, a) pair per decomposition digit, over the
    full modulus base, evaluation domain."""

    digits: list


@dataclass
class KeyMaterial:
    params_id: bytes
    secret: RnsPoly
    secret_ntt: RnsPoly
    public: tuple
    galois_keys: dict
    row_swap_elt: int

    def has_step(self, elt: int) -> bool:
        return elt in self.galois_keys


def galois_elt_from_step(params: HEParams, step: int) -> int:
    """Automorphism element realizing a cyclic row rotation by `step`."""
    n = params.n
    m = 2 * n
    row = n // 2
    step %= row
    if step == 0:
        return 1
    return pow(3, step, m)


def registered_steps(params: HEParams):
    """Power-of-two steps covered by generated rotation keys."""
    steps = []
    p = 1
    while p <= params.n // 4:
        steps.extend([p, -p])
        p *= 2
    return steps


def _sample_flood(sampler: SeededSampler, bound: int, moduli, n: int) -> RnsPoly:
    vals = ring.sample_uniform_signed(sampler, bound, n)
    rows = [(vals % m.value).astype(np.uint64) for m in moduli]
    return RnsPoly(np.stack(rows), tuple(moduli), COEFF)


def _ks_gadget_factors(params: HEParams):
    """factor[j][i] = (P * W_j) mod q_i, the digit-j CRT lift scaled by the
    key prime, reduced into every residue of the full base."""
    base = rns_base(params)
    values = base.values
    key_prime = values[-1]
    q_ct = params.q_ct
    factors = []
    for j, qj in enumerate(values[:-1]):
        qi = q_ct // qj
        w = qi * pow(qi, -1, qj) % q_ct
        pw = key_prime * w
        factors.append([pw % v for v in values])
    return factors


def _make_kskey(params, sampler, s_ntt, target_ntt) -> KSKey:
    """Keys encrypting (P * W_j * target) under the secret, per digit."""
    base = rns_base(params)
    moduli = base.moduli
    n = params.n
    b_ks = max(1, round(params.t * 2 ** params.ks_pad_bits))
    digits = []
    for j, factors in enumerate(_ks_gadget_factors(params)):
        a = ring.sample_uniform(sampler.child(f"ks-a-{j}"), moduli, n)
        a = RnsPoly(a.coeffs, a.moduli, EVAL)
        e = poly_add(
            ring.sample_error(sampler.child(f"ks-e-{j}"), moduli, n, params.sigma),
            _sample_flood(sampler.child(f"ks-pad-{j}"), b_ks, moduli, n),
        )
        b = poly_neg(poly_add(poly_mul_pointwise(a, s_ntt), ntt_forward(e)))
        b = poly_add(b, poly_mul_scalar(target_ntt, factors))
        digits.append((b, a))
    return KSKey(digits)


def keygen(params: HEParams, seed) -> KeyMaterial:
    """Deterministic key generation: secret, public pair, rotation keys."""
    sampler = SeededSampler(seed)
    base = rns_base(params)
    moduli = base.moduli
    n = params.n
    s = ring.sample_ternary(sampler.child("secret"), moduli, n)
    s_ntt = ntt_forward(s)
    a = ring.sample_uniform(sampler.child("pk-a"), moduli, n)
    a = RnsPoly(a.coeffs, a.moduli, EVAL)
    e = ring.sample_error(sampler.child("pk-e"), moduli, n, params.sigma)
    p0 = poly_neg(poly_add(poly_mul_pointwise(a, s_ntt), ntt_forward(e)))
    p1 = a
    # self-test: P0 + P1*s must be a small-error zero
    chk = ntt_inverse(poly_add(p0, poly_mul_pointwise(p1, s_ntt)))
    worst = 0
    m0 = moduli[0].value
    row = chk.coeffs[0].astype(object)
    for x in row:
        x = int(x)
        worst = max(worst, min(x, m0 - x))
    if worst > 6 * params.sigma:
        raise BfvError("public key self-test failed")

    galois = {}
    m = 2 * n
    for step in registered_steps(params):
        elt = galois_elt_from_step(params, step)
        if elt in galois:
            continue
        s_rot = apply_automorphism(s, elt)
        galois[elt] = _make_kskey(params, sampler.child(f"gal-{elt}"),
                                  s_ntt, ntt_forward(s_rot))
    row_swap = m - 1
    s_rot = apply_automorphism(s, row_swap)
    galois[row_swap] = _make_kskey(params, sampler.child("gal-rowswap"),
                                   s_ntt, ntt_forward(s_rot))
    return KeyMaterial(params.params_id, s, s_ntt, (p0, p1), galois, row_swap)


# ---------------------------------------------------------------------------
# Modulus switching


def _mod_down(p: RnsPoly) -> RnsPoly:
    """Divide by the last residue's modulus with rounding (drop it)."""
    if p.k < 2:
        raise BfvError("cannot drop the only remaining residue")
    if p.domain != COEFF:
        raise BfvError("modulus switch requires coefficient domain")
    last = p.moduli[-1]
    big_p = last.value
    xp = p.coeffs[-1].astype(np.int64)
    delta = np.where(xp > big_p // 2, xp - big_p, xp)
    out_moduli = p.moduli[:-1]
    rows = []
    for i, m in enumerate(out_moduli):
        q = m.value
        diff = ((p.coeffs[i].astype(np.int64) - delta) % q).astype(np.uint64)
        inv = pow(big_p % q, -1, q)
        tmp = np.empty_like(diff)
        _kernels.vec_mulmod_scalar(tmp, diff, np.uint64(inv * m._r % q),
                                   np.uint64(q), np.uint64(m._ninv))
        rows.append(tmp)
    return RnsPoly(np.stack(rows), out_moduli, COEFF)


# ---------------------------------------------------------------------------
# Encrypt / decrypt / noise


def encrypt(pk: KeyMaterial, params: HEParams, pt: Plaintext, seed) -> Ciphertext:
    """Asymmetric encryption: an encrypted zero from (P0, P1) and fresh
    randomness, modulus-switched off the key prime, plus the scaled message.
    """
    if pk.params_id != params.params_id:
        raise BfvError("key/parameter mismatch")
    _record("encrypt")
    sampler = SeededSampler(seed)
    base = rns_base(params)
    moduli = base.moduli
    n = params.n
    p0, p1 = pk.public

    u = ring.sample_ternary(sampler.child("u"), moduli, n)
    u_ntt = ntt_forward(u)
    e1 = ring.sample_error(sampler.child("e1"), moduli, n, params.sigma)
    e2 = ring.sample_error(sampler.child("e2"), moduli, n, params.sigma)
    c0 = poly_add(ntt_inverse(poly_mul_pointwise(u_ntt, p0)), e1)
    c1 = poly_add(ntt_inverse(poly_mul_pointwise(u_ntt, p1)), e2)
    c0 = _mod_down(c0)
    c1 = _mod_down(c1)

    pad_bound = max(0, round(params.t * 2 ** params.enc_pad_bits))
    if pad_bound:
        pad = _sample_flood(sampler.child("pad"), pad_bound, c0.moduli, n)
        c0 = poly_add(c0, pad)

    m_coeffs = encode(params, pt)
    delta = params.delta
    rows = []
    for m in c0.moduli:
        rows.append((m_coeffs % m.value).astype(np.uint64))
    m_poly = RnsPoly(np.stack(rows), c0.moduli, COEFF)
    c0 = poly_add(c0, poly_mul_scalar(m_poly, delta))
    return Ciphertext([c0, c1], params.params_id)


def _dot_with_secret(sk: KeyMaterial, ct: Ciphertext) -> RnsPoly:
    """c0 + c1*s (+ higher components) over the ciphertext's residues."""
    active = ct.active_residues
    s_ntt = RnsPoly(sk.secret_ntt.coeffs[:active].copy(),
                    sk.secret_ntt.moduli[:active], EVAL)
    acc = ct.components[0]
    power = s_ntt
    for comp in ct.components[1:]:
        term = ntt_inverse(poly_mul_pointwise(ntt_forward(comp), power))
        acc = poly_add(acc, term)
    return acc


def _centered_scaled_noise(sk, params, ct):
    """Centered coefficients of t*(c0 + c1 s) mod q_active, as ints."""
    x = _dot_with_secret(sk, ct)
    base = rns_base(params)
    q_act = 1
    for m in x.moduli:
        q_act *= m.value
    coeffs = ring.crt_recombine(x, base)
    t = params.t
    out = []
    for c in coeffs:
        y = c * t % q_act
        if y > q_act // 2:
            y -= q_act
        out.append(y)
    return out, q_act


def decrypt(sk: KeyMaterial, params: HEParams, ct: Ciphertext,
            encoding="slot", check_noise=False) -> Plaintext:
    """Exact decryption: scale c0 + c1*s by t/q with rounding, reduce mod t.

    Exactness is guaranteed whenever the noise budget is positive. A
    saturated ciphertext silently yields garbage unless `check_noise` is
    set (the meter needs the secret key, so the check is a debug path).
    """
    if sk.params_id != ct.params_id:
        raise BfvError("key/ciphertext mismatch")
    _record("decrypt")
    if check_noise and noise_budget(sk, params, ct).exhausted:
        raise NoiseOverflowError("noise overflow: budget exhausted")
    x = _dot_with_secret(sk, ct)
    base = rns_base(params)
    q_act = 1
    for m in x.moduli:
        q_act *= m.value
    coeffs = ring.crt_recombine(x, base)
    t = params.t
    half = q_act // 2
    m_coeffs = np.array(
        [((c * t + half) // q_act) % t for c in coeffs], dtype=np.int64
    )
    return decode(params, m_coeffs, encoding)


@dataclass(frozen=True)
class NoiseReport:
    budget_bits: int
    exhausted: bool


def noise_budget(sk: KeyMaterial, params: HEParams, ct: Ciphertext) -> NoiseReport:
    """Invariant-noise headroom in bits; decryption is exact while > 0."""
    ys, q_act = _centered_scaled_noise(sk, params, ct)
    norm = max(abs(y) for y in ys)
    if norm == 0:
        budget = q_act.bit_length() - 1
    else:
        budget = max(0, q_act.bit_length() - norm.bit_length() - 1)
    return NoiseReport(budget, budget == 0)


# ---------------------------------------------------------------------------
# Homomorphic operations


def _check_pair(a: Ciphertext, b: Ciphertext):
    if a.params_id != b.params_id:
        raise BfvError("mismatched parameters")
    if a.active_residues != b.active_residues:
        raise BfvError("mismatched residue counts")


def add_ct(a: Ciphertext, b: Ciphertext) -> Ciphertext:
    _check_pair(a, b)
    _record("add")
    comps = [poly_add(x, y) for x, y in zip(a.components, b.components)]
    return Ciphertext(comps, a.params_id, max(a.rotation_used, b.rotation_used))


def add_pt(a: Ciphertext, params: HEParams, pt) -> Ciphertext:
    """Add a plaintext: c0 += delta * encode(m)."""
    if params.params_id != a.params_id:
        raise BfvError("mismatched parameters")
    _record("add_pt")
    if isinstance(pt, PreparedPlaintext):
        m_coeffs = pt.coeffs_mod_t
    else:
        m_coeffs = encode(params, pt)
    c0 = a.components[0]
    rows = [(m_coeffs % m.value).astype(np.uint64) for m in c0.moduli]
    m_poly = poly_mul_scalar(RnsPoly(np.stack(rows), c0.moduli, COEFF), params.delta)
    comps = [poly_add(c0, m_poly)] + [c.copy() for c in a.components[1:]]
    return Ciphertext(comps, a.params_id, a.rotation_used)


def mul_pt(a: Ciphertext, params: HEParams, pt) -> Ciphertext:
    """Multiply by a plaintext in slot encoding (element-wise product)."""
    if params.params_id != a.params_id:
        raise BfvError("mismatched parameters")
    _record("mul_pt")
    active = a.active_residues
    if isinstance(pt, PreparedPlaintext):
        w_ntt = _prepared_ntt(params, pt, active)
    else:
        if pt.encoding != "slot":
            raise BfvError("plaintext multiply requires slot encoding")
        prep = prepare_plaintext(params, pt)
        w_ntt = _prepared_ntt(params, prep, active)
    comps = []
    for comp in a.components:
        comps.append(ntt_inverse(poly_mul_pointwise(ntt_forward(comp), w_ntt)))
    return Ciphertext(comps, a.params_id, a.rotation_used)


def _apply_keyswitch(params: HEParams, c1: RnsPoly, kskey: KSKey):
    """(d0, d1) such that d0 + d1*s = c1 * s_target + small error."""
    base = rns_base(params)
    full = base.moduli
    n = params.n
    active = c1.k
    acc0 = RnsPoly.zero(full, n, EVAL)
    acc1 = RnsPoly.zero(full, n, EVAL)
    for j in range(active):
        digit = c1.coeffs[j]
        rows = [(digit % np.uint64(m.value)).astype(np.uint64) for m in full]
        d_ntt = ntt_forward(RnsPoly(np.stack(rows), full, COEFF))
        b_j, a_j = kskey.digits[j]
        acc0 = poly_add(acc0, poly_mul_pointwise(d_ntt, b_j))
        acc1 = poly_add(acc1, poly_mul_pointwise(d_ntt, a_j))
    d0 = _mod_down(ntt_inverse(acc0))
    d1 = _mod_down(ntt_inverse(acc1))
    # align to the ciphertext's active residues
    d0 = RnsPoly(d0.coeffs[:active], d0.moduli[:active], COEFF)
    d1 = RnsPoly(d1.coeffs[:active], d1.moduli[:active], COEFF)
    return d0, d1


def _apply_galois(params: HEParams, ct: Ciphertext, elt: int,
                  keys: KeyMaterial) -> Ciphertext:
    if elt == 1:
        return ct.copy()
    kskey = keys.galois_keys.get(elt)
    if kskey is None:
        raise BfvError(f"no galois key for element {elt}")
    c0 = apply_automorphism(ct.components[0], elt)
    c1 = apply_automorphism(ct.components[1], elt)
    d0, d1 = _apply_keyswitch(params, c1, kskey)
    return Ciphertext([poly_add(c0, d0), d1], ct.params_id, ct.rotation_used)


def _signed_pow2_hops(step: int, row: int):
    """Decompose a row rotation into registered power-of-two hops."""
    step %= row
    if step == 0:
        return []
    if step > row // 2:
        step -= row
    hops = []
    mag = abs(step)
    sign = 1 if step > 0 else -1
    bit = 0
    while mag:
        if mag & 1:
            hops.append(sign * (1 << bit))
        mag >>= 1
        bit += 1
    return hops


def rotate(a: Ciphertext, params: HEParams, step: int, keys: KeyMaterial) -> Ciphertext:
    """Cyclic rotation of the batched slots within each row by `step`.

    Positive steps rotate leftward (slot i takes the value of slot i+step).
    Arbitrary steps are realized as a chain of registered power-of-two
    Galois hops; the whole call counts as a single rotation.
    """
    if params.params_id != a.params_id:
        raise BfvError("mismatched parameters")
    _record("rotate")
    row = params.n // 2
    out = a.copy()
    for hop in _signed_pow2_hops(step, row):
        elt = galois_elt_from_step(params, hop)
        out = _apply_galois(params, out, elt, keys)
    return out


def swap_rows(a: Ciphertext, params: HEParams, keys: KeyMaterial) -> Ciphertext:
    """Exchange the two N/2-slot batching rows."""
    _record("rotate")
    return _apply_galois(params, a, keys.row_swap_elt, keys)


def drop_residue(ct: Ciphertext) -> Ciphertext:
    """Modulus-switch off the last active residue, shrinking the ciphertext."""
    if ct.active_residues < 2:
        raise BfvError("cannot drop the only remaining residue")
    _record("drop_residue")
    comps = [_mod_down(c) for c in ct.components]
    return Ciphertext(comps, ct.params_id, ct.rotation_used)


# ---------------------------------------------------------------------------
# Key serialization (wire format for the offload protocol)


def _poly_to_bytes(p: RnsPoly) -> bytes:
    return b"".join(p.coeffs[i].astype("<u8").tobytes() for i in range(p.k))


def _poly_from_bytes(data: bytes, offset: int, moduli, n: int, domain) -> tuple:
    rows = []
    for _ in range(len(moduli)):
        rows.append(np.frombuffer(data, dtype="<u8", count=n, offset=offset).copy())
        offset += 8 * n
    return RnsPoly(np.stack(rows), tuple(moduli), domain), offset


def serialize_public_material(params: HEParams, keys: KeyMaterial) -> bytes:
    """Public key plus rotation keys (everything the server may hold)."""
    out = [MAGIC, struct.pack("<H", FORMAT_VERSION), params.params_id]
    p0, p1 = keys.public
    out.append(_poly_to_bytes(p0))
    out.append(_poly_to_bytes(p1))
    elts = sorted(keys.galois_keys)
    out.append(struct.pack("<H", len(elts)))
    for elt in elts:
        kskey = keys.galois_keys[elt]
        out.append(struct.pack("<IB", elt, len(kskey.digits)))
        for b, a in kskey.digits:
            out.append(_poly_to_bytes(b))
            out.append(_poly_to_bytes(a))
    return b"".join(out)


def deserialize_public_material(data: bytes, params: HEParams):
    """Returns (public pair, galois dict, row_swap_elt) from the wire form."""
    if data[:4] != MAGIC:
        raise BfvError("bad magic")
    if data[6:38] != params.params_id:
        raise BfvError("key material for different parameters")
    base = rns_base(params)
    moduli = base.moduli
    n = params.n
    off = 38
    p0, off = _poly_from_bytes(data, off, moduli, n, EVAL)
    p1, off = _poly_from_bytes(data, off, moduli, n, EVAL)
    count, = struct.unpack_from("<H", data, off)
    off += 2
    galois = {}
    for _ in range(count):
        elt, digits = struct.unpack_from("<IB", data, off)
        off += 5
        pairs = []
        for _ in range(digits):
            b, off = _poly_from_bytes(data, off, moduli, n, EVAL)
            a, off = _poly_from_bytes(data, off, moduli, n, EVAL)
            pairs.append((b, a))
        galois[elt] = KSKey(pairs)
    return (p0, p1), galois, 2 * n - 1


@dataclass
class PublicMaterial:
    """Server-side key view: can evaluate, cannot decrypt."""

    params_id: bytes
    public: tuple
    galois_keys: dict
    row_swap_elt: int

    def has_step(self, elt):
        return elt in self.galois_keys


def public_material(params: HEParams, keys: KeyMaterial) -> PublicMaterial:
    return PublicMaterial(params.params_id, keys.public, keys.galois_keys,
                          keys.row_swap_elt)


def public_material_from_bytes(data: bytes, params: HEParams) -> PublicMaterial:
    public, galois, row_swap = deserialize_public_material(data, params)
    return PublicMaterial(params.params_id, public, galois, row_swap)
