import numpy as np
import pytest

from app.custom_error import DecodeError, InvalidArgumentError
from app.models.quantization_models import QuantizationScheme
from app.models.stream_models import ValuePrecision
from app.services.quantization_services import (
    decode_blocks,
    dequantize,
    encode_blocks,
    encoded_size,
    quantize,
    record_length,
)
from app.services.sparse_stream_services import deserialize, payload_length, payload_volume


def _roundtrip(values, scheme: QuantizationScheme, seed: int) -> np.ndarray:
    blocks = quantize(values, scheme, np.random.default_rng(seed))
    return dequantize(blocks, scheme, len(values))


@pytest.mark.parametrize("bits", [2, 4, 8])
def test_values_at_scale_decode_exactly(bits):
    scheme = QuantizationScheme(bits=bits, bucket_size=4)
    np.testing.assert_array_equal(_roundtrip([2.0, 2.0, 2.0, 2.0], scheme, 0), [2.0, 2.0, 2.0, 2.0])


def test_top_level_and_sign_decode_exactly():
    scheme = QuantizationScheme(bits=4, bucket_size=2)
    np.testing.assert_array_equal(_roundtrip([3.0, -3.0], scheme, 0), [3.0, -3.0])


def test_zero_bucket():
    scheme = QuantizationScheme(bits=4, bucket_size=4)
    blocks = quantize(np.zeros(4), scheme)
    assert blocks[0].scale == 0.0
    assert blocks[0].codes == b"\x00\x00"
    np.testing.assert_array_equal(dequantize(blocks, scheme, 4), np.zeros(4))


def test_two_bit_rounding_is_fair():
    scheme = QuantizationScheme(bits=2, bucket_size=2)
    trials = 20000
    decoded = np.array([_roundtrip([1.0, 0.5], scheme, seed)[1] for seed in range(trials)])
    assert set(np.unique(decoded).tolist()) <= {0.0, 1.0}
    assert abs(decoded.mean() - 0.5) < 0.02


def test_unbiased_within_standard_errors():
    v = np.random.default_rng(7).standard_normal(16)
    scheme = QuantizationScheme(bits=4, bucket_size=8)
    trials = 10000
    samples = np.stack([_roundtrip(v, scheme, seed) for seed in range(trials)]).astype(np.float64)
    stderr = samples.std(axis=0, ddof=1) / np.sqrt(trials)
    assert np.all(np.abs(samples.mean(axis=0) - v) <= 4 * stderr + 1e-6)


@pytest.mark.parametrize("bits", [2, 4, 8])
def test_error_never_exceeds_one_level(bits):
    rng = np.random.default_rng(bits)
    v = rng.standard_normal(3000) * rng.uniform(0.1, 10.0, size=3000)
    scheme = QuantizationScheme(bits=bits, bucket_size=1024)
    blocks = quantize(v, scheme, rng)
    decoded = dequantize(blocks, scheme, v.shape[0])
    scales = np.repeat([block.scale for block in blocks], [block.length for block in blocks])
    assert np.all(np.abs(decoded - v) <= scales / scheme.levels * (1 + 1e-6) + 1e-7)


def test_same_seed_same_bytes():
    v = np.random.default_rng(3).standard_normal(2000)
    scheme = QuantizationScheme(bits=4, bucket_size=512, seed=11)
    first = encode_blocks(quantize(v, scheme), scheme, 2000)
    second = encode_blocks(quantize(v, scheme), scheme, 2000)
    assert first == second


@pytest.mark.parametrize(
    "n, bits, bucket, expected",
    [
        (1024, 4, 1024, 10 + 4 + 512),
        (2500, 4, 1024, 10 + 3 * 4 + 512 + 512 + 226),
        (1001, 2, 1000, 10 + 2 * 4 + 250 + 1),
        (7, 8, 3, 10 + 3 * 4 + 7),
    ],
)
def test_encoded_size_is_exact(n, bits, bucket, expected):
    scheme = QuantizationScheme(bits=bits, bucket_size=bucket)
    payload = encode_blocks(quantize(np.linspace(-1.0, 1.0, n), scheme), scheme, n)
    assert encoded_size(n, scheme) == expected
    assert len(payload) == expected
    assert record_length(payload) == expected


def test_payload_decodes_through_stream_codec():
    v = np.linspace(-2.0, 2.0, 100)
    scheme = QuantizationScheme(bits=8, bucket_size=32)
    blocks = quantize(v, scheme, np.random.default_rng(0))
    payload = encode_blocks(blocks, scheme, 100)

    stream = deserialize(payload, ValuePrecision.F32)
    assert stream.is_dense and stream.dimension == 100
    np.testing.assert_array_equal(stream.values, dequantize(blocks, scheme, 100))
    assert payload_length(payload) == len(payload)
    assert payload_volume(payload) == (0, -(-len(payload) // 4))


def test_decode_blocks_recovers_scheme():
    scheme = QuantizationScheme(bits=2, bucket_size=5)
    blocks = quantize(np.arange(12.0), scheme)
    decoded, recovered, n = decode_blocks(encode_blocks(blocks, scheme, 12))
    assert n == 12
    assert (recovered.bits, recovered.bucket_size) == (2, 5)
    assert decoded == blocks



def test_rejects_bad_input():
    scheme = QuantizationScheme()
    with pytest.raises(InvalidArgumentError):
        quantize([], scheme)
    with pytest.raises(InvalidArgumentError):
        quantize([1.0, np.nan], scheme)
    with pytest.raises(DecodeError):
        dequantize(quantize([1.0, 2.0], scheme), scheme, 3)


def test_scale_never_falls_below_the_bucket_maximum():
    scheme = QuantizationScheme(bits=2, bucket_size=2)
    v = np.array([1e-46, 0.0])
    blocks = quantize(v, scheme, np.random.default_rng(0))
    assert blocks[0].scale >= 1e-46
    assert np.all(np.abs(dequantize(blocks, scheme, 2) - v) <= blocks[0].scale)

    v = np.array([1.0 + 1e-12, 0.5])
    (block,) = quantize(v, scheme)
    assert block.scale >= v[0]


def test_rejects_magnitudes_beyond_float32():
    with pytest.raises(InvalidArgumentError):
        quantize([1e39, 1.0], QuantizationScheme(bits=8))
    largest = float(np.finfo(np.float32).max)
    decoded = dequantize(quantize([largest, 1.0], QuantizationScheme(bits=8)), QuantizationScheme(bits=8), 2)
    assert np.all(np.isfinite(decoded))
