"""Encrypted linear layers over packed ciphertexts, 4-bit quantization,
plaintext reference layers, and per-layer compute/communication accounting.

Convolution and fully-connected layers run at multiplicative depth one:
every plaintext multiply acts on a (possibly rotated) input ciphertext,
never on the output of another multiply. Channel alignment and kernel
offsets are pure rotations; zero padding at image edges is realized by
zeroing the corresponding weight-plaintext slots, so the rotations stay
mask-free.
"""

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import bfv, packing
from .bfv import Ciphertext, HEParams, Plaintext
from .packing import PackingLayout


class NnError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Quantization


@dataclass
class QTensor:
    """Symmetric linear quantization: real value = data * scale."""

    data: np.ndarray
    scale: float
    zero_point: int = 0
    bits: int = 4

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.int64)
        lo, hi = -(1 << (self.bits - 1)), (1 << (self.bits - 1)) - 1
        if self.data.min(initial=0) < lo or self.data.max(initial=0) > hi:
            raise NnError(f"values outside signed {self.bits}-bit range")

    @property
    def shape(self):
        return self.data.shape


def quantize(t, bits: int = 4) -> QTensor:
    if bits not in (4, 8):
        raise NnError("bits must be 4 or 8")
    t = np.asarray(t, dtype=np.float64)
    qmax = (1 << (bits - 1)) - 1
    qmin = -(1 << (bits - 1))
    peak = float(np.abs(t).max(initial=0.0))
    scale = peak / qmax if peak > 0 else 1.0
    data = np.clip(np.round(t / scale), qmin, qmax).astype(np.int64)
    return QTensor(data, scale, 0, bits)


def dequantize(q: QTensor) -> np.ndarray:
    return q.data.astype(np.float64) * q.scale


# ---------------------------------------------------------------------------
# Layer and network specifications


@dataclass
class LayerSpec:
    kind: str                      # conv2d | fc | relu | pool
    in_shape: tuple                # (H, W, C) or (n,) for fc inputs
    out_shape: tuple
    kernel: tuple = None           # (Kh, Kw, Cin, Cout) for conv2d
    stride: int = 1
    padding: str = "same"          # conv2d: same | valid
    pool_size: int = 2
    pool_kind: str = "max"         # max | avg
    weights: QTensor = None
    name: str = ""

    def __post_init__(self):
        self.in_shape = tuple(int(x) for x in self.in_shape)
        self.out_shape = tuple(int(x) for x in self.out_shape)
        if self.kernel is not None:
            self.kernel = tuple(int(x) for x in self.kernel)
        self._check_shapes()

    def _check_shapes(self):
        if self.kind == "conv2d":
            h, w, c = self.in_shape
            kh, kw, cin, cout = self.kernel
            if cin != c:
                raise NnError(f"{self.name}: kernel expects {cin} channels, input has {c}")
            if self.padding == "same":
                ho, wo = _ceil_div(h, self.stride), _ceil_div(w, self.stride)
            elif self.padding == "valid":
                ho = (h - kh) // self.stride + 1
                wo = (w - kw) // self.stride + 1
            else:
                raise NnError(f"unknown padding {self.padding!r}")
            if self.out_shape != (ho, wo, cout):
                raise NnError(
                    f"{self.name}: out_shape {self.out_shape} != derived {(ho, wo, cout)}"
                )
        elif self.kind == "fc":
            if math.prod(self.in_shape) < 1 or len(self.out_shape) != 1:
                raise NnError(f"{self.name}: bad fc shapes")
        elif self.kind == "pool":
            h, w, c = self.in_shape
            if self.out_shape != (h // self.pool_size, w // self.pool_size, c):
                raise NnError(f"{self.name}: pool shape mismatch")
        elif self.kind == "relu":
            if self.in_shape != self.out_shape:
                raise NnError(f"{self.name}: relu must preserve shape")
        else:
            raise NnError(f"unknown layer kind {self.kind!r}")

    @property
    def is_linear(self) -> bool:
        return self.kind in ("conv2d", "fc")

    def macs(self) -> int:
        if self.kind == "conv2d":
            ho, wo, cout = self.out_shape
            kh, kw, cin, _ = self.kernel
            return ho * wo * kh * kw * cin * cout
        if self.kind == "fc":
            return math.prod(self.in_shape) * self.out_shape[0]
        return 0


def _ceil_div(a, b):
    return -(-a // b)


@dataclass
class NetworkSpec:
    name: str
    layers: list

    def __post_init__(self):
        prev = None
        for layer in self.layers:
            if prev is not None:
                a = math.prod(prev.out_shape)
                b = math.prod(layer.in_shape)
                if a != b:
                    raise NnError(
                        f"layer {layer.name}: input size {b} does not chain "
                        f"with previous output size {a}"
                    )
            prev = layer

    def total_macs(self) -> int:
        return sum(layer.macs() for layer in self.layers)

    def layer_counts(self) -> dict:
        counts = {"conv2d": 0, "fc": 0, "relu": 0, "pool": 0}
        for layer in self.layers:
            counts[layer.kind] += 1
        return counts

    def spec_hash(self) -> str:
        """Shape-only digest: client and server agree on the architecture
        without the client ever holding the weights."""
        import hashlib
        blob = json.dumps(_network_to_dict(self), sort_keys=True,
                          default=str).encode()
        return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------------------
# Network spec / weight file I/O


def _layer_to_dict(layer: LayerSpec, weight_ref=None, weights_inline=False):
    d = {
        "kind": layer.kind,
        "name": layer.name,
        "in_shape": list(layer.in_shape),
        "out_shape": list(layer.out_shape),
    }
    if layer.kind == "conv2d":
        d.update(kernel=list(layer.kernel), stride=layer.stride, padding=layer.padding)
    if layer.kind == "pool":
        d.update(pool_size=layer.pool_size, pool_kind=layer.pool_kind)
    if layer.weights is not None:
        if weights_inline:
            d["weights_sha"] = _qtensor_digest(layer.weights)
        elif weight_ref:
            d["weights"] = weight_ref
    return d


def _qtensor_digest(q: QTensor) -> str:
    import hashlib
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(q.data.astype("<i8")).tobytes())
    h.update(json.dumps([q.scale, q.zero_point, q.bits]).encode())
    return h.hexdigest()


def _network_to_dict(net: NetworkSpec, weight_dir=None, weights_inline=False):
    layers = []
    for i, layer in enumerate(net.layers):
        ref = None
        if layer.weights is not None and weight_dir is not None:
            ref = f"{net.name}_{i:02d}_{layer.name or layer.kind}.bin"
        layers.append(_layer_to_dict(layer, ref, weights_inline))
    return {"name": net.name, "layers": layers}


def save_qtensor(path: str, q: QTensor):
    """Raw little-endian int8 tensor plus a JSON sidecar."""
    np.ascontiguousarray(q.data.astype("<i1")).tofile(path)
    sidecar = {
        "shape": list(q.shape),
        "scale": q.scale,
        "zero_point": q.zero_point,
        "bits": q.bits,
    }
    with open(path + ".json", "w") as f:
        json.dump(sidecar, f, indent=1)


def load_qtensor(path: str) -> QTensor:
    with open(path + ".json") as f:
        meta = json.load(f)
    data = np.fromfile(path, dtype="<i1").astype(np.int64).reshape(meta["shape"])
    return QTensor(data, meta["scale"], meta["zero_point"], meta["bits"])


def save_network(net: NetworkSpec, spec_path: str, weight_dir: str = None):
    d = _network_to_dict(net, weight_dir)
    if weight_dir is not None:
        os.makedirs(weight_dir, exist_ok=True)
        for layer, entry in zip(net.layers, d["layers"]):
            if "weights" in entry:
                save_qtensor(os.path.join(weight_dir, entry["weights"]), layer.weights)
    with open(spec_path, "w") as f:
        json.dump(d, f, indent=1)


def load_network(spec_path: str, weight_dir: str = None) -> NetworkSpec:
    with open(spec_path) as f:
        d = json.load(f)
    layers = []
    for entry in d["layers"]:
        weights = None
        if "weights" in entry and weight_dir is not None:
            weights = load_qtensor(os.path.join(weight_dir, entry["weights"]))
        layers.append(LayerSpec(
            kind=entry["kind"],
            in_shape=entry["in_shape"],
            out_shape=entry["out_shape"],
            kernel=tuple(entry["kernel"]) if "kernel" in entry else None,
            stride=entry.get("stride", 1),
            padding=entry.get("padding", "same"),
            pool_size=entry.get("pool_size", 2),
            pool_kind=entry.get("pool_kind", "max"),
            weights=weights,
            name=entry.get("name", ""),
        ))
    return NetworkSpec(d["name"], layers)


# ---------------------------------------------------------------------------
# Plaintext reference layers (client-side and verification path)


def conv2d_reference(x: np.ndarray, layer: LayerSpec) -> np.ndarray:
    """Integer convolution of an (H, W, Cin) tensor, exact."""
    h, w, cin = layer.in_shape
    kh, kw, _, cout = layer.kernel
    stride = layer.stride
    x = np.asarray(x, dtype=np.int64).reshape(h, w, cin)
    wgt = layer.weights.data.reshape(kh, kw, cin, cout)
    ho, wo, _ = layer.out_shape
    dy0 = (kh - 1) // 2 if layer.padding == "same" else 0
    dx0 = (kw - 1) // 2 if layer.padding == "same" else 0
    out = np.zeros((ho, wo, cout), dtype=np.int64)
    for yo in range(ho):
        for xo in range(wo):
            for dy in range(kh):
                yi = yo * stride + dy - dy0
                if not 0 <= yi < h:
                    continue
                for dx in range(kw):
                    xi = xo * stride + dx - dx0
                    if not 0 <= xi < w:
                        continue
                    out[yo, xo] += x[yi, xi] @ wgt[dy, dx]
    return out


def fc_reference(x: np.ndarray, layer: LayerSpec) -> np.ndarray:
    vec = np.asarray(x, dtype=np.int64).reshape(-1)
    return layer.weights.data @ vec  # weights: (n_out, n_in)


def relu_reference(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x), 0)


def pool_reference(x: np.ndarray, layer: LayerSpec) -> np.ndarray:
    h, w, c = layer.in_shape
    s = layer.pool_size
    x = np.asarray(x).reshape(h, w, c)
    ho, wo = h // s, w // s
    blocks = x[: ho * s, : wo * s].reshape(ho, s, wo, s, c)
    if layer.pool_kind == "max":
        return blocks.max(axis=(1, 3))
    return blocks.mean(axis=(1, 3))


def relu_pool_requantize(x: QTensor, layers, bits: int = 4) -> QTensor:
    """Client-side nonlinear stage: apply relu/pool layers, requantize."""
    vals = x.data.astype(np.float64)
    for layer in layers:
        if layer.kind == "relu":
            vals = np.maximum(vals, 0)
        elif layer.kind == "pool":
            vals = pool_reference(vals, layer)
        else:
            raise NnError(f"nonlinear stage got {layer.kind!r}")
    return quantize(vals * x.scale, bits)


# ---------------------------------------------------------------------------
# Encrypted layer geometry


def conv_layout(layer: LayerSpec, params: HEParams) -> PackingLayout:
    h, w, cin = layer.in_shape
    kh, kw, _, cout = layer.kernel
    margin = _ceil_div(kh, 2) * w + _ceil_div(kw, 2)
    channels = max(_next_pow2(cin), 1)
    row = params.n // 2
    slot = packing._next_pow2(h * w + 2 * margin)
    per_ct = row // slot
    if per_ct < 1:
        raise NnError(f"{layer.name}: window {h * w} does not fit one ciphertext")
    return PackingLayout(min(channels, per_ct), h * w, margin, slot, row)


def _next_pow2(x):
    return packing._next_pow2(x)


def conv_offsets(layer: LayerSpec):
    """Centered kernel offsets (dy, dx, window offset)."""
    kh, kw, _, _ = layer.kernel
    _, w, _ = layer.in_shape
    dy0, dx0 = (kh - 1) // 2, (kw - 1) // 2
    out = []
    for dy in range(kh):
        for dx in range(kw):
            out.append((dy - dy0, dx - dx0, (dy - dy0) * w + (dx - dx0)))
    return out


def conv_output_positions(layer: LayerSpec) -> np.ndarray:
    """Window positions of the strided outputs inside the input window."""
    h, w, _ = layer.in_shape
    kh, kw, _, _ = layer.kernel
    ho, wo, _ = layer.out_shape
    stride = layer.stride
    if layer.padding == "same":
        y0 = x0 = 0
    else:
        y0, x0 = (kh - 1) // 2, (kw - 1) // 2
    ys = (np.arange(ho) * stride + y0)[:, None]
    xs = (np.arange(wo) * stride + x0)[None, :]
    return (ys * w + xs).reshape(-1)


def accumulator_bound(layer: LayerSpec, input_bits: int = 4) -> int:
    """Worst-case accumulator magnitude for the encrypted layer."""
    xmax = 1 << (input_bits - 1)
    wmax = 1 << ((layer.weights.bits if layer.weights else 4) - 1)
    if layer.kind == "conv2d":
        kh, kw, cin, _ = layer.kernel
        fanin = kh * kw * cin
    else:
        fanin = math.prod(layer.in_shape)
    return fanin * xmax * wmax


def check_accumulator(layer: LayerSpec, params: HEParams, input_bits: int = 4):
    bound = accumulator_bound(layer, input_bits)
    if bound >= params.t // 2:
        raise NnError(
            f"t too small for layer {layer.name or layer.kind}: worst-case "
            f"accumulator {bound} exceeds t/2 = {params.t // 2}"
        )


def to_signed(values: np.ndarray, t: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.int64) % t
    return v - np.where(v > t // 2, t, 0)


# ---------------------------------------------------------------------------
# Encrypted convolution (diagonal schedule over channel-slotted packing)


def pack_image(x: np.ndarray, layer: LayerSpec, layout: PackingLayout):
    """Per-channel packed vectors, one per input ciphertext."""
    h, w, cin = layer.in_shape
    x = np.asarray(x, dtype=np.int64).reshape(h, w, cin)
    flat = [x[:, :, c].reshape(-1) for c in range(cin)]
    g = layout.channel_count
    groups = []
    for a in range(_ceil_div(cin, g)):
        chans = []
        for c in range(g):
            idx = a * g + c
            chans.append(flat[idx] if idx < cin else np.zeros(h * w, np.int64))
        groups.append(packing.pack(chans, layout))
    return groups


def encrypt_image(keys, params, x, layer: LayerSpec, seed):
    layout = conv_layout(layer, params)
    pvs = pack_image(x, layer, layout)
    cts = []
    for i, pv in enumerate(pvs):
        cts.append(packing.encrypt_packed(keys, params, pv, seed=(seed, i)))
    return cts, layout


def _conv_weight_plaintext(layer, layout, params, a, b, j, dy, dx):
    """Weight mask for input group a, output group b, channel shift j and
    kernel offset (dy, dx); zero where the source pixel is out of bounds."""
    h, w, cin = layer.in_shape
    kh, kw, _, cout = layer.kernel
    g = layout.channel_count
    wgt = layer.weights.data.reshape(kh, kw, cin, cout)
    dy0, dx0 = (kh - 1) // 2, (kw - 1) // 2
    block = np.zeros(layout.total, dtype=np.int64)
    any_nonzero = False
    ys, xs = np.divmod(np.arange(h * w), w)
    valid = ((ys + dy >= 0) & (ys + dy < h) & (xs + dx >= 0) & (xs + dx < w))
    for c in range(g):
        co = b * g + c
        ci = a * g + (c + j) % g
        if co >= cout or ci >= cin:
            continue
        value = wgt[dy + dy0, dx + dx0, ci, co]
        if value == 0:
            continue
        any_nonzero = True
        lo, hi = layout.window_span(c)
        vals = np.where(valid, value, 0)
        block[lo:hi] = vals
    if not any_nonzero:
        return None
    slots = np.zeros(params.n, dtype=np.int64)
    reps = layout.replicas
    slots[: layout.total * reps] = np.tile(block, reps)
    return Plaintext(slots)


def conv2d_encrypted(ct_in, layer: LayerSpec, layout: PackingLayout,
                     params: HEParams, keys) -> list:
    """Encrypted 2-D convolution; decrypt+unpack equals the integer oracle.

    One rotated copy of the input per (channel shift, kernel offset), one
    plaintext multiply each, all at depth 1; accumulation is ciphertext
    addition. Output channel c of output group b lives in slot region c.
    """
    if layer.kind != "conv2d" or layer.weights is None:
        raise NnError("conv2d_encrypted needs a conv2d layer with weights")
    check_accumulator(layer, params)
    h, w, cin = layer.in_shape
    cout = layer.kernel[3]
    g = layout.channel_count
    n_in = len(ct_in)
    n_out = _ceil_div(cout, g)
    offsets = conv_offsets(layer)
    outputs = []
    for b in range(n_out):
        acc = None
        for a in range(n_in):
            base = ct_in[a]
            shifted = base
            for j in range(g):
                if j > 0:
                    shifted = packing.channel_rotate(shifted, params, layout, 1, keys)
                plains = []
                for dy, dx, off in offsets:
                    pt = _conv_weight_plaintext(layer, layout, params, a, b, j, dy, dx)
                    if pt is not None:
                        plains.append((off, pt))
                if not plains:
                    continue
                for off, pt in plains:
                    rotated = (bfv.rotate(shifted, params, off, keys)
                               if off else shifted)
                    term = bfv.mul_pt(rotated, params, pt)
                    acc = term if acc is None else bfv.add_ct(acc, term)
        if acc is None:
            raise NnError(f"{layer.name}: no nonzero weights for output group {b}")
        outputs.append(acc)
    return outputs


def decrypt_conv_output(sk, params, cts, layer: LayerSpec,
                        layout: PackingLayout) -> np.ndarray:
    """Client-side extraction of the strided outputs: (Ho, Wo, Cout) ints."""
    ho, wo, cout = layer.out_shape
    g = layout.channel_count
    pos = conv_output_positions(layer)
    out = np.zeros((ho * wo, cout), dtype=np.int64)
    for b, ct in enumerate(cts):
        windows = packing.unpack(bfv.decrypt(sk, params, ct), layout)
        for c in range(g):
            co = b * g + c
            if co >= cout:
                break
            out[:, co] = to_signed(windows[c][pos], params.t)
    return out.reshape(ho, wo, cout)


# ---------------------------------------------------------------------------
# Encrypted fully-connected (diagonal matrix-vector product)


def fc_layout(layer: LayerSpec, params: HEParams) -> PackingLayout:
    n_in = math.prod(layer.in_shape)
    n_out = layer.out_shape[0]
    n_pad = _next_pow2(max(n_in, n_out))
    row = params.n // 2
    if n_pad > row:
        raise NnError(f"{layer.name}: fc width {n_pad} exceeds {row} slots")
    return PackingLayout(1, n_pad, 0, n_pad, row)


def encrypt_vector(keys, params, x, layer: LayerSpec, seed):
    layout = fc_layout(layer, params)
    vec = np.zeros(layout.window, dtype=np.int64)
    flat = np.asarray(x, dtype=np.int64).reshape(-1)
    vec[: len(flat)] = flat
    ct = packing.encrypt_packed(keys, params, packing.pack([vec], layout), seed=seed)
    return [ct], layout


def fc_encrypted(ct_in, layer: LayerSpec, layout: PackingLayout,
                 params: HEParams, keys) -> list:
    """Diagonal-method matrix-vector product at depth 1."""
    if layer.kind != "fc" or layer.weights is None:
        raise NnError("fc_encrypted needs an fc layer with weights")
    check_accumulator(layer, params)
    n_in = math.prod(layer.in_shape)
    n_out = layer.out_shape[0]
    n_pad = layout.window
    mat = np.zeros((n_pad, n_pad), dtype=np.int64)
    mat[:n_out, :n_in] = layer.weights.data
    ct = ct_in[0]
    acc = None
    current = ct
    current_shift = 0
    idx = np.arange(n_pad)
    for d in range(n_pad):
        diag = mat[idx, (idx + d) % n_pad]
        if not diag.any():
            continue
        if d != current_shift:
            current = bfv.rotate(current, params, d - current_shift, keys)
            current_shift = d
        mask = np.zeros(params.n, dtype=np.int64)
        mask[: layout.row] = np.tile(diag, layout.replicas)
        term = bfv.mul_pt(current, params, Plaintext(mask))
        acc = term if acc is None else bfv.add_ct(acc, term)
    if acc is None:
        raise NnError(f"{layer.name}: all-zero weight matrix")
    return [acc]


def decrypt_fc_output(sk, params, cts, layer: LayerSpec,
                      layout: PackingLayout) -> np.ndarray:
    vals = packing.unpack(bfv.decrypt(sk, params, cts[0]), layout)[0]
    return to_signed(vals[: layer.out_shape[0]], params.t)


# ---------------------------------------------------------------------------
# Cost accounting


@dataclass
class LayerCost:
    name: str
    kind: str
    macs: int
    ciphertexts_in: int
    ciphertexts_out: int
    upload_bytes: int
    download_bytes: int

    @property
    def total_bytes(self):
        return self.upload_bytes + self.download_bytes

    def macs_per_mb(self) -> float:
        if self.total_bytes == 0:
            return float("inf") if self.macs else 0.0
        return self.macs / (self.total_bytes / 1e6)


def _ct_wire_bytes(params, active=None):
    return bfv.CT_HEADER_BYTES + bfv.ciphertext_size(params, active=active)


def layer_cost(layer: LayerSpec, params: HEParams) -> LayerCost:
    """Exact MAC count and ciphertext traffic for one layer."""
    if layer.kind == "conv2d":
        layout = conv_layout(layer, params)
        cin, cout = layer.kernel[2], layer.kernel[3]
        g = layout.channel_count
        cts_in = _ceil_div(cin, g)
        cts_out = _ceil_div(cout * layout.slot, layout.row)
    elif layer.kind == "fc":
        layout = fc_layout(layer, params)
        cts_in, cts_out = 1, 1
    else:
        return LayerCost(layer.name, layer.kind, 0, 0, 0, 0, 0)
    wire = _ct_wire_bytes(params)
    return LayerCost(
        layer.name, layer.kind, layer.macs(),
        cts_in, cts_out, cts_in * wire, cts_out * wire,
    )


def network_comm_report(net: NetworkSpec, params: HEParams) -> dict:
    """Per-layer costs plus totals; both directions at every boundary."""
    costs = []
    for layer in net.layers:
        try:
            if layer.is_linear:
                check_accumulator(layer, params)
            costs.append(layer_cost(layer, params))
        except NnError as e:
            raise NnError(f"infeasible layer {layer.name or layer.kind}: {e}") from e
    return {
        "network": net.name,
        "layers": costs,
        "total_macs": sum(c.macs for c in costs),
        "total_upload_bytes": sum(c.upload_bytes for c in costs),
        "total_download_bytes": sum(c.download_bytes for c in costs),
        "total_bytes": sum(c.total_bytes for c in costs),
    }
