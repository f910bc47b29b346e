import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from sepmark.messages import (MessageError, binarize, bit_error_ratio, bits_to_hex,
                              encode_message, hex_to_bits, random_bits)


def test_encode_basic():
    assert encode_message([1, 0, 1], 0.1).tolist() == [0.1, -0.1, 0.1]


def test_encode_all_zero_bits():
    out = encode_message([0] * 30, 0.1)
    assert out.shape == (30,)
    assert (out == -0.1).all()


def test_encode_alpha_015():
    assert encode_message([1, 1, 0, 0], 0.15).tolist() == [0.15, 0.15, -0.15, -0.15]


def test_encode_rejects_non_binary():
    with pytest.raises(MessageError):
        encode_message([0, 2, 1], 0.1)
    with pytest.raises(MessageError):
        encode_message([0.5], 0.1)


def test_encode_rejects_bad_alpha():
    with pytest.raises(MessageError):
        encode_message([1, 0], 0.0)


def test_binarize_threshold_at_zero():
    assert binarize([0.07, -0.02, 0.0]).tolist() == [1, 0, 0]


def test_binarize_sign_boundary():
    assert binarize([-1e-12, 1e-12]).tolist() == [0, 1]


def test_binarize_accepts_torch():
    t = torch.tensor([[0.3, -0.3], [-0.1, 0.2]], requires_grad=True)
    assert binarize(t).tolist() == [[1, 0], [0, 1]]


@given(st.lists(st.integers(0, 1), min_size=1, max_size=200),
       st.floats(min_value=1e-6, max_value=10.0, allow_nan=False))
def test_encode_binarize_round_trip(bits, alpha):
    assert binarize(encode_message(bits, alpha)).tolist() == bits


def test_ber_half_mismatch():
    assert bit_error_ratio([1, 1, 0, 0], [1, 0, 0, 1]) == 50.0


def test_ber_identity_and_complement():
    rng = np.random.default_rng(0)
    bits = random_bits(rng, 64)
    assert bit_error_ratio(bits, bits) == 0.0
    assert bit_error_ratio(bits, 1 - bits) == 100.0


def test_ber_batched_average():
    a = [[1, 1, 0, 0], [0, 0, 0, 0]]
    b = [[1, 0, 0, 1], [0, 0, 0, 0]]  # 2 mismatches out of 8 bits
    assert bit_error_ratio(a, b) == 25.0


def test_ber_accepts_signal_inputs():
    a = encode_message([1, 0, 1, 1], 0.1)
    assert bit_error_ratio(a, [0.9, 0.2, -0.3, 0.4]) == 50.0


def test_ber_shape_mismatch():
    with pytest.raises(ValueError):
        bit_error_ratio([1, 0], [1, 0, 1])


@given(st.lists(st.integers(0, 1), min_size=1, max_size=64),
       st.lists(st.integers(0, 1), min_size=1, max_size=64))
def test_ber_symmetric(a, b):
    if len(a) != len(b):
        return
    assert bit_error_ratio(a, b) == bit_error_ratio(b, a)


@settings(max_examples=200)
@given(st.integers(0, 2**64 - 1), st.integers(1, 64))
def test_hex_round_trip(value, length):
    value &= (1 << length) - 1
    bits = [(value >> (length - 1 - i)) & 1 for i in range(length)]
    assert hex_to_bits(bits_to_hex(bits), length).tolist() == bits


def test_hex_formatting():
    assert bits_to_hex([1, 0, 1]) == "5"
    assert bits_to_hex([1, 0, 1, 0, 1]) == "15"  # 5 bits -> 2 nibbles, zero padded
    assert bits_to_hex([0] * 8) == "00"


def test_hex_rejects_bad_input():
    with pytest.raises(MessageError):
        hex_to_bits("zz", 8)
    with pytest.raises(MessageError):
        hex_to_bits("fff", 8)  # wrong width
    with pytest.raises(MessageError):
        hex_to_bits("ff", 7)  # value wider than length


def test_loop_oracle_small():
    rng = np.random.default_rng(42)
    for _ in range(50):
        a = random_bits(rng, 16, batch=4)
        b = random_bits(rng, 16, batch=4)
        count = 0
        for row_a, row_b in zip(a.tolist(), b.tolist()):
            for bit_a, bit_b in zip(row_a, row_b):
                count += bit_a ^ bit_b
        assert bit_error_ratio(a, b) == 100.0 * count / a.size
