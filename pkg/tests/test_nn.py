import numpy as np
import pytest

from hekit import bfv, networks, nn
from hekit.nn import (
    LayerSpec,
    NetworkSpec,
    NnError,
    QTensor,
    conv2d_encrypted,
    conv_layout,
    decrypt_conv_output,
    decrypt_fc_output,
    dequantize,
    encrypt_image,
    encrypt_vector,
    fc_encrypted,
    layer_cost,
    network_comm_report,
    quantize,
    relu_pool_requantize,
)


def conv2d_oracle(x, w, stride, padding):
    """Brute-force integer convolution: O(Ho*Wo*K^2*Cin*Cout) loops."""
    h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    if padding == "same":
        ho, wo = -(-h // stride), -(-wd // stride)
        dy0, dx0 = (kh - 1) // 2, (kw - 1) // 2
    else:
        ho, wo = (h - kh) // stride + 1, (wd - kw) // stride + 1
        dy0 = dx0 = 0
    out = np.zeros((ho, wo, cout), dtype=np.int64)
    for yo in range(ho):
        for xo in range(wo):
            for co in range(cout):
                acc = 0
                for dy in range(kh):
                    for dx in range(kw):
                        yi = yo * stride + dy - (dy0 if padding == "same" else 0)
                        xi = xo * stride + dx - (dx0 if padding == "same" else 0)
                        if 0 <= yi < h and 0 <= xi < wd:
                            for ci in range(cin):
                                acc += int(x[yi, xi, ci]) * int(w[dy, dx, ci, co])
                out[yo, xo, co] = acc
    return out


def matvec_oracle(mat, vec):
    out = np.zeros(mat.shape[0], dtype=np.int64)
    for i in range(mat.shape[0]):
        for j in range(mat.shape[1]):
            out[i] += int(mat[i, j]) * int(vec[j])
    return out


def make_conv_layer(rng, h, w, cin, cout, k, stride=1, padding="same"):
    wgt = rng.integers(-7, 8, (k, k, cin, cout))
    if padding == "same":
        ho, wo = -(-h // stride), -(-w // stride)
    else:
        ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    return LayerSpec("conv2d", (h, w, cin), (ho, wo, cout), (k, k, cin, cout),
                     stride=stride, padding=padding,
                     weights=QTensor(wgt, 1.0, bits=4), name="conv")


class TestQuantize:
    def test_zero_tensor(self):
        q = quantize(np.zeros((3, 3)))
        assert not q.data.any()

    def test_range_and_error(self):
        q = quantize(np.array([-1.0, 1.0]), bits=4)
        assert q.data.min() >= -8 and q.data.max() <= 7
        assert np.abs(dequantize(q) - [-1.0, 1.0]).max() <= q.scale

    def test_roundtrip_error_bound(self):
        rng = np.random.default_rng(0)
        t = rng.normal(size=(8, 8)) * 3
        for bits in (4, 8):
            q = quantize(t, bits)
            assert np.abs(dequantize(q) - t).max() <= q.scale / 2 + 1e-9

    def test_saturation(self):
        q = QTensor(np.array([7, -8]), 1.0, bits=4)
        with pytest.raises(NnError):
            QTensor(np.array([8]), 1.0, bits=4)


class TestReferenceLayers:
    def test_relu(self):
        x = QTensor(np.array([[-5, 3], [0, -1]]).reshape(2, 2), 0.5, bits=8)
        lay = LayerSpec("relu", (2, 2), (2, 2))
        # plain reference on raw arrays
        np.testing.assert_array_equal(nn.relu_reference([[-5, 3], [0, -1]]),
                                      [[0, 3], [0, 0]])

    def test_maxpool(self):
        lay = LayerSpec("pool", (2, 2, 1), (1, 1, 1), pool_size=2)
        got = nn.pool_reference(np.array([[1, 2], [3, 4]]).reshape(2, 2, 1), lay)
        assert got.reshape(()) == 4

    def test_requantize_stays_in_range(self):
        rng = np.random.default_rng(1)
        x = QTensor(rng.integers(-100, 100, (4, 4, 2)), 0.01, bits=8)
        relu = LayerSpec("relu", (4, 4, 2), (4, 4, 2))
        pool = LayerSpec("pool", (4, 4, 2), (2, 2, 2), pool_size=2)
        out = relu_pool_requantize(x, [relu, pool], bits=4)
        assert out.bits == 4
        assert out.data.min() >= -8 and out.data.max() <= 7
        assert (out.data >= 0).all()  # relu came first


class TestEncryptedConv:
    def test_identity_1x1(self, params_a, keys_a):
        layer = LayerSpec("conv2d", (3, 3, 1), (3, 3, 1), (1, 1, 1, 1),
                          weights=QTensor(np.ones((1, 1, 1, 1)), 1.0), name="id")
        rng = np.random.default_rng(2)
        x = rng.integers(-8, 8, (3, 3, 1))
        cts, layout = encrypt_image(keys_a, params_a, x, layer, seed=40)
        out = conv2d_encrypted(cts, layer, layout, params_a, keys_a)
        got = decrypt_conv_output(keys_a, params_a, out, layer, layout)
        np.testing.assert_array_equal(got, x)

    def test_4x4_single_channel_3x3(self, params_a, keys_a):
        rng = np.random.default_rng(3)
        layer = make_conv_layer(rng, 4, 4, 1, 1, 3)
        x = rng.integers(-8, 8, (4, 4, 1))
        cts, layout = encrypt_image(keys_a, params_a, x, layer, seed=41)
        out = conv2d_encrypted(cts, layer, layout, params_a, keys_a)
        got = decrypt_conv_output(keys_a, params_a, out, layer, layout)
        want = conv2d_oracle(x, layer.weights.data, 1, "same")
        np.testing.assert_array_equal(got, want)

    def test_8x8_multichannel_strided(self, params_a, keys_a):
        rng = np.random.default_rng(4)
        layer = make_conv_layer(rng, 8, 8, 4, 2, 3, stride=2)
        x = rng.integers(-8, 8, (8, 8, 4))
        cts, layout = encrypt_image(keys_a, params_a, x, layer, seed=42)
        out = conv2d_encrypted(cts, layer, layout, params_a, keys_a)
        assert len(out) == -(-2 * layout.slot // layout.row)
        got = decrypt_conv_output(keys_a, params_a, out, layer, layout)
        want = conv2d_oracle(x, layer.weights.data, 2, "same")
        np.testing.assert_array_equal(got, want)

    def test_valid_padding(self, params_a, keys_a):
        rng = np.random.default_rng(5)
        layer = make_conv_layer(rng, 6, 6, 2, 3, 3, padding="valid")
        x = rng.integers(-8, 8, (6, 6, 2))
        cts, layout = encrypt_image(keys_a, params_a, x, layer, seed=43)
        out = conv2d_encrypted(cts, layer, layout, params_a, keys_a)
        got = decrypt_conv_output(keys_a, params_a, out, layer, layout)
        want = conv2d_oracle(x, layer.weights.data, 1, "valid")
        np.testing.assert_array_equal(got, want)

    def test_randomized_instances(self, params_a, keys_a):
        rng = np.random.default_rng(6)
        for trial in range(6):
            h = int(rng.integers(3, 10))
            cin = int(rng.choice([1, 2, 4]))
            cout = int(rng.choice([1, 2, 3]))
            k = int(rng.choice([1, 3]))
            stride = int(rng.choice([1, 2]))
            padding = str(rng.choice(["same", "valid"]))
            if padding == "valid" and h < k:
                continue
            layer = make_conv_layer(rng, h, h, cin, cout, k, stride, padding)
            x = rng.integers(-8, 8, (h, h, cin))
            cts, layout = encrypt_image(keys_a, params_a, x, layer, seed=(44, trial))
            out = conv2d_encrypted(cts, layer, layout, params_a, keys_a)
            got = decrypt_conv_output(keys_a, params_a, out, layer, layout)
            want = conv2d_oracle(x, layer.weights.data, stride, padding)
            np.testing.assert_array_equal(got, want)

    def test_depth_one_no_stacked_multiplies(self, params_a, keys_a):
        # every mul_pt acts on a rotation of the fresh input: with one input
        # ciphertext the number of multiplies is bounded by shifts * offsets
        rng = np.random.default_rng(7)
        layer = make_conv_layer(rng, 4, 4, 2, 2, 3)
        x = rng.integers(-8, 8, (4, 4, 2))
        cts, layout = encrypt_image(keys_a, params_a, x, layer, seed=45)
        with bfv.count_ops() as ops:
            conv2d_encrypted(cts, layer, layout, params_a, keys_a)
        assert ops["mul_pt"] <= layout.channel_count * 9
        assert ops["decrypt"] == 0

    def test_accumulator_guard(self, params_b, keys_b):
        rng = np.random.default_rng(8)
        layer = make_conv_layer(rng, 16, 16, 512, 1, 3)  # fanin 4608 * 64 > t/2
        with pytest.raises(NnError, match="t too small"):
            nn.check_accumulator(layer, params_b)


class TestEncryptedFc:
    def test_identity(self, params_a, keys_a):
        layer = LayerSpec("fc", (8,), (8,),
                          weights=QTensor(np.eye(8, dtype=np.int64), 1.0), name="fc")
        rng = np.random.default_rng(9)
        x = rng.integers(-8, 8, 8)
        cts, layout = encrypt_vector(keys_a, params_a, x, layer, seed=46)
        out = fc_encrypted(cts, layer, layout, params_a, keys_a)
        got = decrypt_fc_output(keys_a, params_a, out, layer, layout)
        np.testing.assert_array_equal(got, x)

    def test_8x8_random(self, params_a, keys_a):
        rng = np.random.default_rng(10)
        mat = rng.integers(-7, 8, (8, 8))
        layer = LayerSpec("fc", (8,), (8,), weights=QTensor(mat, 1.0), name="fc")
        x = rng.integers(-8, 8, 8)
        cts, layout = encrypt_vector(keys_a, params_a, x, layer, seed=47)
        out = fc_encrypted(cts, layer, layout, params_a, keys_a)
        got = decrypt_fc_output(keys_a, params_a, out, layer, layout)
        np.testing.assert_array_equal(got, matvec_oracle(mat, x))

    def test_ones_row_sums(self, params_a, keys_a):
        n = 16
        mat = np.ones((1, n), dtype=np.int64)
        layer = LayerSpec("fc", (n,), (1,), weights=QTensor(mat, 1.0), name="sum")
        rng = np.random.default_rng(11)
        x = rng.integers(-8, 8, n)
        cts, layout = encrypt_vector(keys_a, params_a, x, layer, seed=48)
        out = fc_encrypted(cts, layer, layout, params_a, keys_a)
        got = decrypt_fc_output(keys_a, params_a, out, layer, layout)
        assert got[0] == x.sum()

    def test_rectangular(self, params_a, keys_a):
        rng = np.random.default_rng(12)
        mat = rng.integers(-7, 8, (5, 12))
        layer = LayerSpec("fc", (12,), (5,), weights=QTensor(mat, 1.0), name="fc")
        x = rng.integers(-8, 8, 12)
        cts, layout = encrypt_vector(keys_a, params_a, x, layer, seed=49)
        out = fc_encrypted(cts, layer, layout, params_a, keys_a)
        got = decrypt_fc_output(keys_a, params_a, out, layer, layout)
        np.testing.assert_array_equal(got, matvec_oracle(mat, x))

    def test_noise_left_after_layer(self, params_a, keys_a):
        rng = np.random.default_rng(13)
        mat = rng.integers(-7, 8, (16, 16))
        layer = LayerSpec("fc", (16,), (16,), weights=QTensor(mat, 1.0), name="fc")
        x = rng.integers(-8, 8, 16)
        cts, layout = encrypt_vector(keys_a, params_a, x, layer, seed=50)
        out = fc_encrypted(cts, layer, layout, params_a, keys_a)
        assert bfv.noise_budget(keys_a, params_a, out[0]).budget_bits > 0


class TestCosts:
    def test_single_mac(self, params_a):
        layer = LayerSpec("conv2d", (1, 1, 1), (1, 1, 1), (1, 1, 1, 1),
                          weights=QTensor(np.ones((1, 1, 1, 1)), 1.0))
        assert layer.macs() == 1

    def test_table_totals(self):
        targets = {"LeNetSm": 0.24e6, "LeNetLg": 12.27e6,
                   "SqzNet": 32.60e6, "VGG16": 313.26e6}
        for name, want in targets.items():
            got = networks.build(name).total_macs()
            assert abs(got / want - 1) < 0.01

    def test_layer_counts_match_table(self):
        rows = {
            "LeNetSm": (2, 1, 2, 2),
            "LeNetLg": (2, 2, 3, 2),
            "SqzNet": (10, 0, 10, 3),
            "VGG16": (13, 2, 14, 5),
        }
        for name, (cnv, fc, act, pl) in rows.items():
            counts = networks.build(name).layer_counts()
            assert (counts["conv2d"], counts["fc"], counts["relu"],
                    counts["pool"]) == (cnv, fc, act, pl)

    def test_single_conv_layer_bytes(self, params_a):
        # one input and one output ciphertext: 2 x (payload + header)
        layer = LayerSpec("conv2d", (4, 4, 1), (4, 4, 1), (3, 3, 1, 1),
                          weights=QTensor(np.ones((3, 3, 1, 1)), 1.0), name="c")
        cost = layer_cost(layer, params_a)
        assert cost.ciphertexts_in == 1 and cost.ciphertexts_out == 1
        wire = 262_144 + bfv.CT_HEADER_BYTES
        assert cost.total_bytes == 2 * wire

    def test_lenet_small_comm_within_2x(self, params_b):
        report = network_comm_report(networks.lenet_small(), params_b)
        total_mb = report["total_bytes"] / 1e6
        assert total_mb <= 2 * 0.66
        assert total_mb >= 0.66 / 2

    def test_empty_network(self, params_a):
        report = network_comm_report(NetworkSpec("empty", []), params_a)
        assert report["total_bytes"] == 0
        assert report["total_macs"] == 0

    def test_macs_per_mb_monotone_in_channels(self, params_a):
        prev = 0
        for c in (32, 64, 128):
            layer = LayerSpec("conv2d", (8, 8, c), (8, 8, c), (3, 3, c, c),
                              weights=None, name=f"c{c}")
            cost = layer_cost(layer, params_a)
            assert cost.macs_per_mb() > prev
            prev = cost.macs_per_mb()

    def test_3x3_dominates_1x1_in_macs_per_mb(self, params_a):
        big = LayerSpec("conv2d", (8, 8, 64), (8, 8, 64), (3, 3, 64, 64), name="v")
        small = LayerSpec("conv2d", (8, 8, 64), (8, 8, 64), (1, 1, 64, 64), name="s")
        assert layer_cost(big, params_a).macs_per_mb() > \
            layer_cost(small, params_a).macs_per_mb()

    def test_infeasible_layer_named(self, params_b):
        net = NetworkSpec("bad", [
            LayerSpec("fc", (4096,), (10,),
                      weights=QTensor(np.ones((10, 4096)), 1.0), name="fat_fc"),
        ])
        with pytest.raises(NnError, match="fat_fc"):
            network_comm_report(net, params_b)


class TestNetworkIO:
    def test_spec_roundtrip(self, tmp_path):
        net = networks.attach_random_weights(networks.toy_cnn(), seed=3)
        spec = tmp_path / "toy.json"
        nn.save_network(net, str(spec), str(tmp_path / "weights"))
        back = nn.load_network(str(spec), str(tmp_path / "weights"))
        assert back.name == net.name
        assert len(back.layers) == len(net.layers)
        for a, b in zip(net.layers, back.layers):
            assert a.kind == b.kind and a.in_shape == b.in_shape
            if a.weights is not None:
                np.testing.assert_array_equal(a.weights.data, b.weights.data)
                assert a.weights.scale == pytest.approx(b.weights.scale)
        assert back.spec_hash() == net.spec_hash()

    def test_weight_file_format(self, tmp_path):
        q = QTensor(np.arange(-8, 8).reshape(4, 4), 0.25, bits=4)
        path = str(tmp_path / "w.bin")
        nn.save_qtensor(path, q)
        raw = np.fromfile(path, dtype="<i1")
        np.testing.assert_array_equal(raw, np.arange(-8, 8))
        back = nn.load_qtensor(path)
        np.testing.assert_array_equal(back.data, q.data)
        assert back.scale == pytest.approx(0.25)
