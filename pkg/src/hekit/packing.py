"""Slot layout planning, rotational redundancy, and masked permutation.

A windowed rotation cyclically shifts the elements of a sub-range of the
packed vector. Whole-vector rotation is the only shift the scheme supports
natively, so each channel window is packed with wrap-around copies on both
sides (`margin` elements per side). A single whole-vector rotation then
realizes the windowed rotation in every channel at rotation-level noise,
with no masking multiplies. The masked-permutation baseline implements the
same permutation as a sum of rotate-then-mask products and burns noise for
every mask multiply.

Channel slots are rounded to a power of two and the packed block is
replicated across the batching row, so whole-channel alignment is also a
single rotation.
"""

from dataclasses import dataclass, replace

import numpy as np

from . import bfv
from .bfv import Ciphertext, HEParams, Plaintext


class PackingError(ValueError):
    pass


def _next_pow2(x: int) -> int:
    return 1 << max(0, (x - 1).bit_length())


def _row_size(params_or_n) -> int:
    n = params_or_n.n if hasattr(params_or_n, "n") else int(params_or_n)
    return n // 2


@dataclass(frozen=True)
class PackingLayout:
    """Geometry of one packed ciphertext row.

    Each channel occupies `slot` consecutive positions: `margin` wrap-around
    elements, the `window` data elements, `margin` more wrap-around
    elements, then zero padding up to the power-of-two slot size.
    """

    channel_count: int
    window: int
    margin: int
    slot: int
    row: int

    @property
    def total(self) -> int:
        return self.channel_count * self.slot

    @property
    def replicas(self) -> int:
        """Copies of the packed block tiled across the row (0 = no tiling)."""
        return self.row // self.total if self.row % self.total == 0 else 1

    def channel_base(self, c: int) -> int:
        return c * self.slot

    def window_span(self, c: int):
        start = c * self.slot + self.margin
        return start, start + self.window

    def describe(self) -> dict:
        return {
            "channel_count": self.channel_count,
            "window": self.window,
            "margin": self.margin,
            "slot": self.slot,
        }

    @classmethod
    def from_dict(cls, d: dict, params_or_n) -> "PackingLayout":
        return cls(d["channel_count"], d["window"], d["margin"], d["slot"],
                   _row_size(params_or_n))


@dataclass
class PackedVector:
    slots: np.ndarray  # length row, integers mod t
    layout: PackingLayout


def plan_layout(channel_count: int, window: int, max_rotation: int,
                params_or_n) -> PackingLayout:
    """Minimal layout covering every rotation magnitude up to max_rotation."""
    if channel_count < 1 or window < 1:
        raise PackingError("channel_count and window must be at least 1")
    if max_rotation < 0:
        raise PackingError("max_rotation must be nonnegative")
    margin = max_rotation
    slot = _next_pow2(window + 2 * margin)
    row = _row_size(params_or_n)
    total = channel_count * slot
    if total > row:
        raise PackingError(
            f"does not fit: {channel_count} channels x slot {slot} = {total} "
            f"> {row} slots (split across ciphertexts)"
        )
    return PackingLayout(channel_count, window, margin, slot, row)


def pack(data, layout: PackingLayout) -> PackedVector:
    """Fill margins with wrap-around copies; tile the block across the row."""
    data = [np.asarray(d, dtype=np.int64) for d in data]
    if len(data) != layout.channel_count:
        raise PackingError(
            f"expected {layout.channel_count} channels, got {len(data)}"
        )
    for d in data:
        if len(d) != layout.window:
            raise PackingError(
                f"channel length {len(d)} does not match window {layout.window}"
            )
    m, w = layout.margin, layout.window
    block = np.zeros(layout.total, dtype=np.int64)
    for c, d in enumerate(data):
        base = layout.channel_base(c)
        if m:
            block[base:base + m] = d[-m:]
            block[base + m + w:base + m + w + m] = d[:m]
        block[base + m:base + m + w] = d
    slots = np.zeros(layout.row, dtype=np.int64)
    reps = layout.replicas
    slots[: layout.total * reps] = np.tile(block, reps)
    return PackedVector(slots, layout)


def unpack(v, layout: PackingLayout) -> np.ndarray:
    """Extract each channel's window span; margins and padding are ignored."""
    if isinstance(v, PackedVector):
        slots = v.slots
    elif isinstance(v, Plaintext):
        slots = v.values[: layout.row]
    else:
        slots = np.asarray(v)[: layout.row]
    out = np.empty((layout.channel_count, layout.window), dtype=np.int64)
    for c in range(layout.channel_count):
        lo, hi = layout.window_span(c)
        out[c] = slots[lo:hi]
    return out


def encrypt_packed(keys, params: HEParams, pv: PackedVector, seed) -> Ciphertext:
    vals = np.zeros(params.n, dtype=np.int64)
    vals[: layout_row_check(pv.layout, params)] = pv.slots
    return bfv.encrypt(keys, params, Plaintext(vals), seed)


def layout_row_check(layout: PackingLayout, params: HEParams) -> int:
    if layout.row != params.n // 2:
        raise PackingError("layout row size does not match parameters")
    return layout.row


def windowed_rotate(ct: Ciphertext, params: HEParams, layout: PackingLayout,
                    r: int, keys) -> Ciphertext:
    """Rotate every channel window by r via one whole-vector rotation.

    The signed cumulative rotation is tracked on the ciphertext: once the
    packed redundancy is used up, further rotation would pull in stale
    margin contents, so it is an error rather than silent corruption.
    """
    used = ct.rotation_used + r
    if abs(used) > layout.margin:
        raise PackingError(
            f"insufficient redundancy: cumulative rotation {used} exceeds "
            f"margin {layout.margin}"
        )
    out = bfv.rotate(ct, params, r, keys)
    out.rotation_used = used
    return out


def channel_rotate(ct: Ciphertext, params: HEParams, layout: PackingLayout,
                   channel_steps: int, keys) -> Ciphertext:
    """Cyclically permute whole channels: one rotation by steps*slot.

    Requires the block to tile the row exactly (power-of-two channel count),
    so that channel wrap-around is supplied by the neighbouring replica.
    """
    if layout.replicas * layout.total != layout.row:
        raise PackingError(
            "channel rotation requires the packed block to tile the row; "
            "pad the channel count to a power of two"
        )
    if channel_steps == 0:
        return ct.copy()
    out = bfv.rotate(ct, params, channel_steps * layout.slot, keys)
    out.rotation_used = ct.rotation_used
    return out


def windowed_permutation(layout: PackingLayout, r: int) -> np.ndarray:
    """The windowed rotation by r written as an explicit slot permutation.

    Entry i holds the source slot for destination i, or -1 for slots whose
    content is irrelevant (margins and padding are dropped at unpack).
    """
    perm = np.full(layout.row, -1, dtype=np.int64)
    w = layout.window
    for c in range(layout.channel_count):
        lo, hi = layout.window_span(c)
        for i in range(w):
            perm[lo + i] = lo + (i + r) % w
    return perm


def masked_permute(ct: Ciphertext, params: HEParams, permutation, keys) -> Ciphertext:
    """Arbitrary slot permutation as sum of rotate-then-mask products.

    `permutation[i]` is the source slot for destination i (-1 zeroes the
    slot). This is the conventional baseline that rotational redundancy
    replaces; each distinct offset costs one rotation and one 0/1 mask
    multiply, and the masks dominate the noise budget.
    """
    perm = np.asarray(permutation, dtype=np.int64)
    row = params.n // 2
    if len(perm) != row:
        raise PackingError("permutation must cover the full batching row")
    offsets = {}
    for dest, src in enumerate(perm):
        if src < 0:
            continue
        off = int((src - dest) % row)
        offsets.setdefault(off, []).append(dest)
    if not offsets:
        raise PackingError("empty permutation")
    acc = None
    for off, dests in sorted(offsets.items()):
        rotated = bfv.rotate(ct, params, off, keys) if off else ct
        mask = np.zeros(params.n, dtype=np.int64)
        mask[dests] = 1
        term = bfv.mul_pt(rotated, params, Plaintext(mask))
        acc = term if acc is None else bfv.add_ct(acc, term)
    acc.rotation_used = ct.rotation_used
    return acc


# ---------------------------------------------------------------------------
# Noise-table scenario (initial / after-rotate / after-permute)


def noise_table_row(params: HEParams, keys, seed=0, window=3) -> dict:
    """Budgets for one parameter row: fresh, after one windowed rotation,
    and after the same windowed rotation done as a masked permutation."""
    layout = plan_layout(1, window, 1, params)
    rng = np.random.default_rng(seed)
    data = rng.integers(0, params.t, (1, window))
    ct = encrypt_packed(keys, params, pack(data, layout), seed=seed + 1)
    initial = bfv.noise_budget(keys, params, ct).budget_bits
    rotated = windowed_rotate(ct, params, layout, 1, keys)
    after_rotate = bfv.noise_budget(keys, params, rotated).budget_bits
    permuted = masked_permute(ct, params, windowed_permutation(layout, 1), keys)
    after_permute = bfv.noise_budget(keys, params, permuted).budget_bits
    return {
        "n": params.n,
        "t_bits": params.t.bit_length(),
        "modulus_bits": [v.bit_length() for v in params.moduli],
        "initial": initial,
        "after_rotate": after_rotate,
        "after_permute": after_permute,
    }
