"""Client-aided offload protocol with a byte-exact communication ledger.

The client owns the keys and the image; the server owns the network
weights. Linear layers are evaluated on ciphertexts server-side; at every
layer boundary the client decrypts, applies the nonlinear stage, and
re-encrypts fresh (refreshing the noise budget). The server never holds
secret material; its operation log is recorded and must contain zero
decrypt calls.

Wire format: length-prefixed frames (4-byte magic, 1-byte kind, 8-byte
little-endian payload length) over either an in-process duplex pipe or a
TCP socket. Transcripts are deterministic given the seeds and can be
dumped for replay comparison.
"""

import hashlib
import json
import queue
import socket
import struct
import threading
from dataclasses import dataclass, field

import numpy as np

from . import bfv, nn, packing
from .bfv import Plaintext
from .nn import QTensor

FRAME_MAGIC = b"CHOC"
FRAME_HEADER_BYTES = 4 + 1 + 8
LAYER_PREFIX_BYTES = 4 + 4  # layer index + ciphertext count

HELLO = 1
PARAMS = 2
KEYS = 3
LAYER_INPUT = 4
LAYER_OUTPUT = 5
RESULT = 6
ERROR = 7

KIND_NAMES = {
    HELLO: "HELLO", PARAMS: "PARAMS", KEYS: "KEYS",
    LAYER_INPUT: "LAYER_INPUT", LAYER_OUTPUT: "LAYER_OUTPUT",
    RESULT: "RESULT", ERROR: "ERROR",
}


class ProtocolError(RuntimeError):
    pass


@dataclass
class Message:
    kind: int
    payload: bytes = b""


def serialize_message(m: Message) -> bytes:
    return FRAME_MAGIC + struct.pack("<B", m.kind) + \
        struct.pack("<Q", len(m.payload)) + m.payload


def deserialize_message(data: bytes) -> Message:
    if len(data) < FRAME_HEADER_BYTES:
        raise ProtocolError("short read: truncated frame header")
    if data[:4] != FRAME_MAGIC:
        raise ProtocolError("bad magic")
    kind = data[4]
    if kind not in KIND_NAMES:
        raise ProtocolError(f"unknown message kind {kind}")
    length, = struct.unpack_from("<Q", data, 5)
    if len(data) != FRAME_HEADER_BYTES + length:
        raise ProtocolError(
            f"short read: expected {FRAME_HEADER_BYTES + length} bytes, "
            f"got {len(data)}"
        )
    return Message(kind, data[FRAME_HEADER_BYTES:])


# ---------------------------------------------------------------------------
# Transports


class PipeTransport:
    """In-process duplex byte stream over a pair of queues."""

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue):
        self._inbox = inbox
        self._outbox = outbox
        self._buf = b""
        self.closed = False

    def send(self, data: bytes):
        if self.closed:
            raise ProtocolError("transport closed")
        self._outbox.put(bytes(data))

    def recv(self, n: int) -> bytes:
        while len(self._buf) < n:
            chunk = self._inbox.get()
            if chunk is None:
                raise ProtocolError("short read: peer closed")
            self._buf += chunk
        out, self._buf = self._buf[:n], self._buf[n:]
        return out

    def close(self):
        if not self.closed:
            self.closed = True
            self._outbox.put(None)


def pipe_pair():
    a2b, b2a = queue.Queue(), queue.Queue()
    return PipeTransport(b2a, a2b), PipeTransport(a2b, b2a)


class SocketTransport:
    def __init__(self, sock: socket.socket):
        self._sock = sock

    def send(self, data: bytes):
        self._sock.sendall(data)

    def recv(self, n: int) -> bytes:
        chunks = []
        remaining = n
        while remaining:
            chunk = self._sock.recv(min(remaining, 1 << 20))
            if not chunk:
                raise ProtocolError("short read: peer closed")
            chunks.append(chunk)
            remaining -= len(chunk)
        return b"".join(chunks)

    def close(self):
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


def connect_tcp(host: str, port: int) -> SocketTransport:
    return SocketTransport(socket.create_connection((host, port)))


# ---------------------------------------------------------------------------
# Session bookkeeping


@dataclass
class LedgerEntry:
    direction: str        # "up" (client->server) or "down"
    kind: int
    layer: int            # -1 for session-level messages
    nbytes: int


@dataclass
class Session:
    role: str
    params_id: bytes = b""
    network: str = ""
    network_hash: str = ""
    layouts: dict = field(default_factory=dict)
    transcript: list = field(default_factory=list)
    ledger: list = field(default_factory=list)
    ops: dict = field(default_factory=dict)
    frames: list = field(default_factory=list)
    keep_frames: bool = False
    aborted: bool = False

    def record(self, direction: str, msg: Message, layer: int, raw: bytes):
        self.transcript.append({
            "direction": direction,
            "kind": KIND_NAMES[msg.kind],
            "length": len(raw),
            "sha256": hashlib.sha256(raw).hexdigest(),
        })
        self.ledger.append(LedgerEntry(direction, msg.kind, layer, len(raw)))
        if self.keep_frames:
            self.frames.append(raw)

    def bytes_up(self) -> int:
        return sum(e.nbytes for e in self.ledger if e.direction == "up")

    def bytes_down(self) -> int:
        return sum(e.nbytes for e in self.ledger if e.direction == "down")

    def total_bytes(self) -> int:
        return self.bytes_up() + self.bytes_down()

    def dump_transcript(self, path: str):
        with open(path, "w") as f:
            for entry in self.transcript:
                f.write(json.dumps(entry) + "\n")


def _send(session: Session, transport, msg: Message, layer=-1):
    raw = serialize_message(msg)
    direction = "up" if session.role == "client" else "down"
    session.record(direction, msg, layer, raw)
    transport.send(raw)


def _recv(session: Session, transport, layer=-1) -> Message:
    header = transport.recv(FRAME_HEADER_BYTES)
    if header[:4] != FRAME_MAGIC:
        raise ProtocolError("bad magic")
    kind = header[4]
    if kind not in KIND_NAMES:
        raise ProtocolError(f"unknown message kind {kind}")
    length, = struct.unpack_from("<Q", header, 5)
    payload = transport.recv(length) if length else b""
    msg = Message(kind, payload)
    direction = "down" if session.role == "client" else "up"
    session.record(direction, msg, layer, header + payload)
    if kind == ERROR:
        raise ProtocolError(f"peer error: {payload.decode(errors='replace')}")
    return msg


# ---------------------------------------------------------------------------
# Layer scheduling shared by both sides


def linear_stages(net: nn.NetworkSpec):
    """(linear layer, trailing nonlinear layers) pairs, in order."""
    stages = []
    i = 0
    layers = net.layers
    while i < len(layers):
        layer = layers[i]
        if not layer.is_linear:
            raise ProtocolError(
                f"network must start each stage with a linear layer; "
                f"got {layer.kind} at position {i}"
            )
        i += 1
        tail = []
        while i < len(layers) and not layers[i].is_linear:
            tail.append(layers[i])
            i += 1
        stages.append((layer, tail))
    return stages


def _pack_cts(layer_idx: int, cts) -> bytes:
    blobs = [bfv.serialize_ciphertext(ct) for ct in cts]
    return struct.pack("<II", layer_idx, len(blobs)) + b"".join(blobs)


def _unpack_cts(payload: bytes, params):
    if len(payload) < LAYER_PREFIX_BYTES:
        raise ProtocolError("short read: truncated layer payload")
    layer_idx, count = struct.unpack_from("<II", payload, 0)
    off = LAYER_PREFIX_BYTES
    cts = []
    for _ in range(count):
        if len(payload) < off + bfv.CT_HEADER_BYTES:
            raise ProtocolError("short read: truncated ciphertext")
        s, active = struct.unpack_from("<BB", payload, off + 38)
        size = bfv.CT_HEADER_BYTES + 8 * params.n * s * active
        cts.append(bfv.deserialize_ciphertext(payload[off:off + size], params))
        off += size
    if off != len(payload):
        raise ProtocolError("trailing bytes in layer payload")
    return layer_idx, cts


# ---------------------------------------------------------------------------
# Client


def run_client(net: nn.NetworkSpec, image: QTensor, transport,
               params: bfv.HEParams, seed, keys=None,
               keep_frames: bool = False):
    """Offloaded inference; returns (scores, session).

    The client performs only encryption, decryption, the nonlinear stages,
    and requantization; all linear algebra happens server-side on
    ciphertexts. Scores are exact integers matching the local quantized
    reference bit for bit.
    """
    session = Session(role="client", params_id=params.params_id,
                      network=net.name, network_hash=net.spec_hash(),
                      keep_frames=keep_frames)
    sampler = bfv.SeededSampler(seed) if not isinstance(seed, bfv.SeededSampler) else seed
    if keys is None:
        keys = bfv.keygen(params, sampler.child("keys").seed)
    stages = linear_stages(net)
    with bfv.count_ops() as ops:
        try:
            hello = json.dumps({
                "network": net.name,
                "spec_hash": net.spec_hash(),
                "params_id": params.params_id.hex(),
            }).encode()
            _send(session, transport, Message(HELLO, hello))
            reply = _recv(session, transport)
            if reply.kind != PARAMS:
                raise ProtocolError(f"expected PARAMS, got {KIND_NAMES[reply.kind]}")
            ack = json.loads(reply.payload.decode())
            if ack.get("params_id") != params.params_id.hex():
                raise ProtocolError("server parameters do not match")

            key_blob = bfv.serialize_public_material(params, keys)
            _send(session, transport, Message(KEYS, key_blob))

            x = image
            scores = None
            for idx, (layer, tail) in enumerate(stages):
                nn.check_accumulator(layer, params, input_bits=x.bits)
                enc_seed = sampler.child(f"layer-{idx}")
                if layer.kind == "conv2d":
                    cts, layout = nn.encrypt_image(keys, params, x.data, layer,
                                                   seed=enc_seed.seed)
                else:
                    cts, layout = nn.encrypt_vector(keys, params, x.data, layer,
                                                    seed=enc_seed.seed)
                session.layouts[idx] = layout.describe()
                _send(session, transport, Message(LAYER_INPUT, _pack_cts(idx, cts)),
                      layer=idx)
                reply = _recv(session, transport, layer=idx)
                if reply.kind != LAYER_OUTPUT:
                    raise ProtocolError(
                        f"expected LAYER_OUTPUT, got {KIND_NAMES[reply.kind]}"
                    )
                got_idx, out_cts = _unpack_cts(reply.payload, params)
                if got_idx != idx:
                    raise ProtocolError("server answered the wrong layer")
                if layer.kind == "conv2d":
                    ints = nn.decrypt_conv_output(keys, params, out_cts, layer, layout)
                else:
                    ints = nn.decrypt_fc_output(keys, params, out_cts, layer, layout)
                # requantized integers are invariant to the (server-held)
                # weight scale, so the client tracks its own scale only
                acc = QTensor(ints, x.scale, bits=64)
                if idx == len(stages) - 1 and not tail:
                    scores = acc
                else:
                    x = nn.relu_pool_requantize(acc, tail, bits=4) if tail else \
                        nn.quantize(nn.dequantize(acc), 4)
                    if idx == len(stages) - 1:
                        scores = x
            _send(session, transport, Message(RESULT))
        except ProtocolError:
            session.aborted = True
            raise
        finally:
            session.ops = dict(ops.counts)
    return scores, session


def session_weight_scale(net: nn.NetworkSpec, stage_idx: int) -> float:
    """Weight scale for a stage; the client learns scales in the spec."""
    layer = linear_stages(net)[stage_idx][0]
    if layer.weights is not None:
        return layer.weights.scale
    return 1.0


def local_reference(net: nn.NetworkSpec, image: QTensor):
    """Plaintext quantized inference along the same schedule (the oracle
    the offloaded result must match bit-exactly)."""
    stages = linear_stages(net)
    x = image
    for idx, (layer, tail) in enumerate(stages):
        if layer.kind == "conv2d":
            ints = nn.conv2d_reference(x.data, layer)
        else:
            ints = nn.fc_reference(x.data, layer)
        acc = QTensor(ints, x.scale * layer.weights.scale, bits=64)
        if idx == len(stages) - 1 and not tail:
            return acc
        x = nn.relu_pool_requantize(acc, tail, bits=4) if tail else \
            nn.quantize(nn.dequantize(acc), 4)
    return x


# ---------------------------------------------------------------------------
# Server


def run_server(transport, model_store: dict, params: bfv.HEParams,
               keep_frames: bool = False) -> Session:
    """Serve one offload session; touches only ciphertexts and weights.

    The operation log recorded in the returned session is the testable
    privacy property: it contains no decrypt calls, and the server never
    receives secret key material.
    """
    session = Session(role="server", params_id=params.params_id,
                      keep_frames=keep_frames)
    keys = None
    net = None
    with bfv.count_ops() as ops:
        try:
            while True:
                try:
                    msg = _recv(session, transport)
                except ProtocolError as e:
                    if "peer error" in str(e):
                        raise
                    session.aborted = True
                    try:
                        _send(session, transport,
                              Message(ERROR, str(e).encode()))
                    except Exception:
                        pass
                    break
                if msg.kind == HELLO:
                    hello = json.loads(msg.payload.decode())
                    name = hello.get("network")
                    if name not in model_store:
                        _send(session, transport,
                              Message(ERROR, f"unknown network {name}".encode()))
                        session.aborted = True
                        break
                    net = model_store[name]
                    if net.spec_hash() != hello.get("spec_hash"):
                        _send(session, transport,
                              Message(ERROR, b"network spec hash mismatch"))
                        session.aborted = True
                        break
                    if hello.get("params_id") != params.params_id.hex():
                        _send(session, transport,
                              Message(ERROR, b"parameter mismatch"))
                        session.aborted = True
                        break
                    session.network = name
                    session.network_hash = hello["spec_hash"]
                    ack = json.dumps({"status": "ok",
                                      "params_id": params.params_id.hex()}).encode()
                    _send(session, transport, Message(PARAMS, ack))
                elif msg.kind == KEYS:
                    keys = bfv.public_material_from_bytes(msg.payload, params)
                elif msg.kind == LAYER_INPUT:
                    if keys is None or net is None:
                        _send(session, transport,
                              Message(ERROR, b"keys or network not established"))
                        session.aborted = True
                        break
                    idx, cts = _unpack_cts(msg.payload, params)
                    stages = linear_stages(net)
                    if not 0 <= idx < len(stages):
                        _send(session, transport,
                              Message(ERROR, f"bad layer index {idx}".encode()))
                        session.aborted = True
                        break
                    layer = stages[idx][0]
                    if layer.kind == "conv2d":
                        layout = nn.conv_layout(layer, params)
                        out = nn.conv2d_encrypted(cts, layer, layout, params, keys)
                    else:
                        layout = nn.fc_layout(layer, params)
                        out = nn.fc_encrypted(cts, layer, layout, params, keys)
                    session.layouts[idx] = layout.describe()
                    _send(session, transport,
                          Message(LAYER_OUTPUT, _pack_cts(idx, out)), layer=idx)
                elif msg.kind == RESULT:
                    break
                else:
                    _send(session, transport,
                          Message(ERROR,
                                  f"unexpected {KIND_NAMES[msg.kind]}".encode()))
                    session.aborted = True
                    break
        finally:
            session.ops = dict(ops.counts)
    return session


def serve_tcp(host: str, port: int, model_store: dict, params,
              max_sessions=None, ready_event=None):
    """Listen and serve sessions until max_sessions (None = forever)."""
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind((host, port))
    srv.listen()
    bound_port = srv.getsockname()[1]
    if ready_event is not None:
        ready_event.port = bound_port
        ready_event.set()
    sessions = []
    served = 0
    try:
        while max_sessions is None or served < max_sessions:
            conn, _ = srv.accept()
            transport = SocketTransport(conn)
            try:
                sessions.append(run_server(transport, model_store, params))
            finally:
                transport.close()
            served += 1
    finally:
        srv.close()
    return sessions


# ---------------------------------------------------------------------------
# Loopback and ledger reporting


def run_loopback(net: nn.NetworkSpec, image: QTensor, params, seed,
                 keys=None, keep_frames=False):
    """Client and server in one process over the pipe transport."""
    client_t, server_t = pipe_pair()
    result = {}

    def server_main():
        result["server"] = run_server(server_t, {net.name: net}, params,
                                      keep_frames=keep_frames)

    thread = threading.Thread(target=server_main, daemon=True)
    thread.start()
    scores, client_session = run_client(
        net, image, client_t, params, seed, keys=keys, keep_frames=keep_frames
    )
    thread.join(timeout=600)
    if thread.is_alive():
        raise ProtocolError("server did not terminate")
    return scores, client_session, result["server"]


def predicted_layer_bytes(net: nn.NetworkSpec, params) -> list:
    """Exact frame sizes for each layer exchange (upload, download)."""
    out = []
    for layer, _ in linear_stages(net):
        cost = nn.layer_cost(layer, params)
        up = FRAME_HEADER_BYTES + LAYER_PREFIX_BYTES + cost.upload_bytes
        down = FRAME_HEADER_BYTES + LAYER_PREFIX_BYTES + cost.download_bytes
        out.append((up, down))
    return out


def ledger_report(session: Session, net: nn.NetworkSpec = None,
                  params=None, baselines: dict = None) -> dict:
    """Per-layer and total bytes; cross-checked against the analytic
    prediction when the network is supplied."""
    per_layer = {}
    session_bytes = {"up": 0, "down": 0}
    key_bytes = 0
    for e in session.ledger:
        if e.kind == KEYS:
            key_bytes += e.nbytes
        if e.layer >= 0:
            slot = per_layer.setdefault(e.layer, {"up": 0, "down": 0})
            slot[e.direction] += e.nbytes
        else:
            session_bytes[e.direction] += e.nbytes
    report = {
        "network": session.network,
        "per_layer": per_layer,
        "layer_bytes": sum(v["up"] + v["down"] for v in per_layer.values()),
        "session_bytes": session_bytes["up"] + session_bytes["down"],
        "key_bytes": key_bytes,
        "total_bytes": session.total_bytes(),
        "aborted": session.aborted,
    }
    if net is not None and params is not None:
        predicted = predicted_layer_bytes(net, params)
        report["predicted_per_layer"] = [
            {"up": up, "down": down} for up, down in predicted
        ]
        report["predicted_layer_bytes"] = sum(u + d for u, d in predicted)
        report["matches_prediction"] = (
            not session.aborted
            and report["layer_bytes"] == report["predicted_layer_bytes"]
        )
    if baselines:
        ours_mb = report["layer_bytes"] / 1e6
        report["baseline_ratios"] = {
            name: (mb / ours_mb if ours_mb else float("inf"))
            for name, mb in baselines.items()
        }
    return report
