import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from enact_heart.audio_io import RawRecording, decode_wav, encode_wav, load, resample
from enact_heart.errors import EmptyPayload, MalformedHeader, UnsupportedEncoding
from oracles import tone_amplitude


def wav_bytes(payload: bytes, fmt=1, channels=1, rate=4000, bits=16, extra_chunk=b"") -> bytes:
    block = channels * bits // 8
    fmt_chunk = struct.pack("<HHIIHH", fmt, channels, rate, rate * block, block, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt_chunk)) + fmt_chunk + extra_chunk
    body += b"data" + struct.pack("<I", len(payload)) + payload
    return b"RIFF" + struct.pack("<I", len(body)) + body


def test_pcm16_scale():
    rec = decode_wav(wav_bytes(np.array([0, 32767], "<i2").tobytes()))
    assert rec.sample_rate == 4000
    np.testing.assert_array_equal(rec.samples, [0.0, 32767 / 32768])


def test_stereo_is_averaged():
    data = np.array([[1.0, -1.0], [0.5, 0.25]], "<f4").tobytes()
    rec = decode_wav(wav_bytes(data, fmt=3, channels=2, bits=32))
    np.testing.assert_allclose(rec.samples, [0.0, 0.375])


def test_empty_payload():
    data = wav_bytes(b"")
    assert len(data) == 44
    with pytest.raises(EmptyPayload):
        decode_wav(data)


def test_malformed_and_unsupported():
    with pytest.raises(MalformedHeader):
        decode_wav(b"RIFX" + b"\0" * 40)
    with pytest.raises(MalformedHeader):
        decode_wav(b"RIFF")
    with pytest.raises(UnsupportedEncoding):
        decode_wav(wav_bytes(b"\0" * 6, bits=24))
    with pytest.raises(UnsupportedEncoding):
        decode_wav(wav_bytes(b"\0" * 8, fmt=6))  # A-law


def test_unknown_chunks_are_skipped():
    extra = b"LIST" + struct.pack("<I", 3) + b"abc\0"  # odd size plus pad byte
    rec = decode_wav(wav_bytes(np.array([16384], "<i2").tobytes(), extra_chunk=extra))
    np.testing.assert_array_equal(rec.samples, [0.5])


def test_empty_recording_rejected():
    with pytest.raises(EmptyPayload):
        RawRecording(np.zeros(0), 4000)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1.0, 1.0, allow_nan=False), min_size=1, max_size=200))
def test_pcm16_roundtrip(values):
    x = np.array(values)
    y = decode_wav(encode_wav(x, 4000)).samples
    assert np.max(np.abs(x - y)) <= 1 / 32768 + 1e-12


def test_identity_resample_is_pass_through():
    rec = RawRecording(np.random.default_rng(0).standard_normal(1000), 4000)
    out = resample(rec, 4000)
    assert out.samples is rec.samples


def test_output_length():
    for n in (1, 999, 44100, 12345):
        rec = RawRecording(np.ones(n), 44100)
        assert len(resample(rec, 4000).samples) == max(1, round(n * 4000 / 44100))


def test_dc_preserved():
    rec = RawRecording(np.full(44100, 0.5), 44100)
    y = resample(rec, 4000).samples
    np.testing.assert_allclose(y[200:-200], 0.5, atol=1e-3)


def test_sine_amplitude_and_phase():
    t = np.arange(44100 * 2) / 44100
    rec = RawRecording(np.sin(2 * np.pi * 50 * t), 44100)
    y = resample(rec, 4000).samples
    mid = y[1000:7000]
    t_new = np.arange(len(y))[1000:7000] / 4000
    assert abs(tone_amplitude(mid, 50, 4000) - 1.0) < 0.01
    # also matches the analytic sine at the new sample instants
    assert np.max(np.abs(mid - np.sin(2 * np.pi * 50 * t_new))) < 0.01


def test_rms_preserved_below_195():
    t = np.arange(44100) / 44100
    x = 0.3 * np.sin(2 * np.pi * 180 * t) + 0.2 * np.sin(2 * np.pi * 70 * t + 1)
    y = resample(RawRecording(x, 44100), 4000).samples
    rms_in = np.sqrt(np.mean(x[4410:-4410] ** 2))
    rms_out = np.sqrt(np.mean(y[400:-400] ** 2))
    assert abs(rms_out / rms_in - 1) < 0.01


def test_resample_linear():
    rng = np.random.default_rng(1)
    x = rng.standard_normal(8000)
    a = resample(RawRecording(x, 8000), 4000).samples
    b = resample(RawRecording(3.7 * x, 8000), 4000).samples
    np.testing.assert_allclose(b, 3.7 * a, rtol=1e-12, atol=1e-13)


def test_load_from_disk(tmp_path):
    p = tmp_path / "x.wav"
    p.write_bytes(encode_wav(np.linspace(-0.5, 0.5, 8000), 8000))
    rec = load(p, 4000)
    assert rec.sample_rate == 4000 and len(rec.samples) == 4000
    assert rec.source_path == str(p)
