import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedprune import codec, nn
from fedprune.codec import (CodecError, VolumeLedger, csr_decode, csr_encode,
                            decode_params, dense_decode, dense_encode,
                            encoded_size)


def params_of(*arrays, ids=None):
    ids = ids or [f"l{i}" for i in range(len(arrays))]
    return nn.ParameterSet(tuple(
        nn.LayerParams(lid, np.asarray(a, dtype=float), np.zeros(2))
        for lid, a in zip(ids, arrays)))


def f32(params):
    return params.map(lambda lid, w, b: (w.astype(np.float32).astype(np.float64),
                                         b.astype(np.float32).astype(np.float64)))


def assert_equal_params(a, b):
    assert a.layer_ids() == b.layer_ids()
    for ea, eb in zip(a.entries, b.entries):
        assert ea.weight.shape == eb.weight.shape
        assert np.array_equal(ea.weight, eb.weight)
        assert np.array_equal(ea.bias, eb.bias)


class TestCsr:
    def test_definition_example(self):
        blob = csr_encode(params_of([[0.0, 5.0], [7.0, 0.0]]))
        # skip global header (8B) + id header (1+2+1+2*4 = 12B)
        body = blob[20:]
        rows, cols, nnz = struct.unpack("<III", body[:12])
        assert (rows, cols, nnz) == (2, 2, 2)
        row_ptr = np.frombuffer(body[12:24], dtype="<u4")
        col_idx = np.frombuffer(body[24:32], dtype="<u4")
        values = np.frombuffer(body[32:40], dtype="<f4")
        assert list(row_ptr) == [0, 1, 2]
        assert list(col_idx) == [1, 0]
        assert list(values) == [5.0, 7.0]

    def test_all_zero_layer(self):
        p = params_of(np.zeros((3, 4)))
        decoded = csr_decode(csr_encode(p))
        assert np.array_equal(decoded.entries[0].weight, np.zeros((3, 4)))
        assert encoded_size(p, "csr") == len(csr_encode(p))

    def test_random_sparse_roundtrip(self):
        rng = np.random.default_rng(0)
        m = rng.normal(size=(100, 100)) * (rng.random((100, 100)) < 0.1)
        p = params_of(m)
        assert_equal_params(csr_decode(csr_encode(p)), f32(p))

    def test_rank4_and_rank1_tensors(self):
        rng = np.random.default_rng(1)
        w4 = rng.normal(size=(6, 2, 3, 3)) * (rng.random((6, 2, 3, 3)) < 0.3)
        w1 = rng.normal(size=7)
        p = params_of(w4, w1)
        assert_equal_params(csr_decode(csr_encode(p)), f32(p))
        assert len(csr_encode(p)) == encoded_size(p, "csr")

    def test_malformed_row_ptr_rejected(self):
        blob = bytearray(csr_encode(params_of([[0.0, 5.0], [7.0, 0.0]])))
        # make row_ptr decreasing: [0,1,2] -> [0,2,1] would move nnz; instead
        # bump row_ptr[1] above row_ptr[2]
        struct.pack_into("<I", blob, 20 + 12 + 4, 9)
        with pytest.raises(CodecError):
            csr_decode(bytes(blob))

    def test_col_idx_out_of_range_rejected(self):
        blob = bytearray(csr_encode(params_of([[0.0, 5.0], [7.0, 0.0]])))
        struct.pack_into("<I", blob, 20 + 12 + 12, 5)   # first col_idx -> 5 >= cols
        with pytest.raises(CodecError):
            csr_decode(bytes(blob))

    def test_bad_magic_and_truncation(self):
        blob = csr_encode(params_of([[1.0]]))
        with pytest.raises(CodecError):
            decode_params(b"XXXX" + blob[4:])
        with pytest.raises(CodecError):
            decode_params(blob[:-2])
        with pytest.raises(CodecError):
            decode_params(blob + b"\x00")


class TestDense:
    def test_roundtrip_identity(self):
        rng = np.random.default_rng(3)
        p = params_of(rng.normal(size=(4, 5)), rng.normal(size=(2, 3, 3, 3)))
        assert_equal_params(dense_decode(dense_encode(p)), f32(p))

    def test_size_formula(self):
        p = params_of(np.ones((10, 20)))
        blob = dense_encode(p)
        assert len(blob) == encoded_size(p, "dense")
        # 4B magic + 4B header + (1+2)B id + 1B ndim + 8B dims + 800B values
        # + 4B bias len + 8B bias
        assert len(blob) == 8 + 3 + 1 + 8 + 4 * 200 + 4 + 8

    def test_lenet_dense_about_1_72_mb(self):
        p = nn.init_model(nn.lenet5(), 0)
        size = encoded_size(p, "dense")
        assert 4 * 431080 <= size <= 4 * 431080 + 200   # payload + headers
        assert size == len(dense_encode(p))

    def test_format_mismatch_rejected(self):
        p = params_of(np.ones(3))
        with pytest.raises(CodecError):
            csr_decode(dense_encode(p))
        with pytest.raises(CodecError):
            dense_decode(csr_encode(p))


class TestSizes:
    def test_csr_payload_formula(self):
        rng = np.random.default_rng(5)
        m = np.zeros((100, 100))
        ix = rng.choice(10000, 1000, replace=False)
        m.flat[ix] = rng.normal(size=1000) + 10.0      # keep away from 0
        p = params_of(m)
        blob = csr_encode(p)
        header = 8 + (1 + 2 + 1 + 8)                    # global + id/dims
        payload = 12 + 4 * 101 + 4 * 1000 + 4 * 1000    # rows/cols/nnz + arrays
        bias = 4 + 8
        assert len(blob) == header + payload + bias
        # sparse-body arithmetic: 4*nnz + 4*nnz + 4*(rows+1) = 8404
        assert 4 * 1000 + 4 * 1000 + 4 * 101 == 8404

    def test_csr_monotone_in_nnz(self):
        rng = np.random.default_rng(6)
        base = rng.normal(size=(40, 40))
        sizes = []
        for keep in (1600, 800, 200, 40, 0):
            m = base.copy().reshape(-1)
            m[np.argsort(np.abs(m))[:1600 - keep]] = 0.0
            sizes.append(encoded_size(params_of(m.reshape(40, 40)), "csr"))
        assert sizes == sorted(sizes, reverse=True)
        assert all(a > b for a, b in zip(sizes, sizes[1:]))

    def test_full_csr_bigger_than_dense(self):
        p = params_of(np.ones((30, 30)))
        assert encoded_size(p, "csr") > encoded_size(p, "dense")

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 8), st.floats(0.0, 1.0), st.integers(0, 2**32 - 1))
    def test_roundtrip_and_size_property(self, rows, cols, density, seed):
        rng = np.random.default_rng(seed)
        m = rng.normal(size=(rows, cols)) * (rng.random((rows, cols)) < density)
        p = params_of(m)
        for fmt, dec in (("csr", csr_decode), ("dense", dense_decode)):
            blob = codec.encode_params(p, fmt)
            assert len(blob) == encoded_size(p, fmt)
            assert_equal_params(dec(blob), f32(p))

    def test_cross_format_agreement(self):
        rng = np.random.default_rng(9)
        m = rng.normal(size=(12, 9)) * (rng.random((12, 9)) < 0.4)
        p = params_of(m)
        assert_equal_params(csr_decode(csr_encode(p)), dense_decode(dense_encode(p)))


class TestLedger:
    def test_simple_round(self):
        led = VolumeLedger()
        rv = led.account_round([10 ** 6] * 10, 10 ** 6, 10, round_index=0, phase="dense")
        assert rv.total_bytes == 20 * 10 ** 6

    def test_all_dense_saving_zero(self):
        led = VolumeLedger()
        for r in range(3):
            led.account_round([500] * 4, 500, 4, round_index=r, phase="admm_prune")
        assert led.saving_percent() == 0.0

    def test_three_round_hand_summed_trace(self):
        # hand ledger: round 0 warmup (dense), rounds 1-2 pruning (sparse)
        led = VolumeLedger()
        led.account_round([100, 100], 100, 2, 0, "warmup")
        led.account_round([30, 50], 100, 2, 1, "admm_prune", dense_uploads=[100, 100])
        led.account_round([20, 20], 100, 2, 2, "masked_finetune", dense_uploads=[100, 100])
        # totals: warmup 400; pruning actual (80+200)+(40+200)=520,
        # dense-equivalent (200+200)*2=800
        assert led.total_bytes() == 400 + 520
        assert led.total_bytes(("warmup",)) == 400
        assert led.dense_total_bytes(VolumeLedger.PRUNING_PHASES) == 800
        assert led.saving_percent() == pytest.approx(100 * (1 - 520 / 800))
