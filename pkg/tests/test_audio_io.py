import struct
import subprocess
import sys
import wave

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nase.audio_io import (
    AudioBuffer, SynthSpec, build_corpus, derive_seed, load_corpus, read_wav, splitmix64,
    synth_clip, write_corpus, write_wav,
)
from nase.dsp import snr_db
from nase.errors import ConfigError, FormatError, IoError, UnsupportedError


def _raw_wav(path, pcm, width=2, channels=1, rate=16000):
    with wave.open(str(path), "wb") as w:
        w.setnchannels(channels)
        w.setsampwidth(width)
        w.setframerate(rate)
        w.writeframes(pcm)


def _pcm_of(path):
    with wave.open(str(path), "rb") as w:
        return np.frombuffer(w.readframes(w.getnframes()), dtype="<i2")


def test_read_scales_pcm(tmp_path):
    p = tmp_path / "a.wav"
    _raw_wav(p, np.array([0, 16384, -32768], dtype="<i2").tobytes())
    buf = read_wav(p)
    assert buf.samples.tolist() == [0.0, 0.5, -1.0]
    assert buf.sample_rate_hz == 16000


def test_stereo_is_averaged(tmp_path):
    p = tmp_path / "s.wav"
    _raw_wav(p, np.array([16384, 0, -16384, -16384], dtype="<i2").tobytes(), channels=2)
    assert read_wav(p).samples.tolist() == [0.25, -0.5]


def test_8bit_is_unsupported(tmp_path):
    p = tmp_path / "b.wav"
    _raw_wav(p, bytes([128, 130, 120]), width=1)
    with pytest.raises(UnsupportedError):
        read_wav(p)


def test_float_codec_is_unsupported(tmp_path):
    p = tmp_path / "f.wav"
    fmt = struct.pack("<HHIIHH", 3, 1, 16000, 64000, 4, 32)
    data = np.zeros(4, dtype="<f4").tobytes()
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(data)) + data
    p.write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)
    with pytest.raises(UnsupportedError):
        read_wav(p)


def test_garbage_is_format_error(tmp_path):
    p = tmp_path / "g.wav"
    p.write_bytes(b"not a riff file at all")
    with pytest.raises(FormatError):
        read_wav(p)


@pytest.mark.parametrize("value, pcm", [(1.0, 32767), (-1.0, -32768), (0.25, 8192), (3.0, 32767)])
def test_write_quantises(tmp_path, value, pcm):
    p = tmp_path / "q.wav"
    write_wav(AudioBuffer([value]), p)
    assert _pcm_of(p).tolist() == [pcm]


def test_write_rounds_half_away_from_zero(tmp_path):
    p = tmp_path / "h.wav"
    write_wav(AudioBuffer([0.5 / 32768, -0.5 / 32768, 1.5 / 32768]), p)
    assert _pcm_of(p).tolist() == [1, -1, 2]


def test_write_unwritable(tmp_path):
    with pytest.raises(IoError):
        write_wav(AudioBuffer([0.0]), tmp_path / "missing" / "x.wav")


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 300), elements=st.floats(-1, 1)))
def test_roundtrip_within_one_quantum(tmp_path_factory, x):
    p = tmp_path_factory.mktemp("rt") / "x.wav"
    write_wav(AudioBuffer(x), p)
    assert np.max(np.abs(read_wav(p).samples - x)) <= 1 / 32768


def test_buffer_invariants():
    assert AudioBuffer([2.0, -5.0]).samples.tolist() == [1.0, -1.0]
    with pytest.raises(ConfigError):
        AudioBuffer([])
    with pytest.raises(ConfigError):
        AudioBuffer([np.nan])
    with pytest.raises(ConfigError):
        AudioBuffer([0.0], 0)


@pytest.mark.parametrize("target", [0.0, 10.0, 20.0])
def test_synth_hits_target_snr(target):
    pair = synth_clip(SynthSpec(target_snr_db=target, clip_seconds=0.5), 7)
    assert abs(snr_db(pair.clean, pair.noisy) - target) <= 0.5
    assert np.sqrt(np.mean(pair.clean.samples**2)) == pytest.approx(0.3, rel=1e-9)


def test_synth_deterministic():
    spec = SynthSpec(clip_seconds=0.25, noise_kind="pink")
    a, b = synth_clip(spec, 42), synth_clip(spec, 42)
    assert np.array_equal(a.clean.samples, b.clean.samples)
    assert np.array_equal(a.noisy.samples, b.noisy.samples)


def test_synth_rejects_degenerate():
    with pytest.raises(ConfigError):
        synth_clip(SynthSpec(num_tones=0), 1)
    with pytest.raises(ConfigError):
        synth_clip(SynthSpec(tone_band_hz=(500, 500)), 1)
    with pytest.raises(ConfigError):
        synth_clip(SynthSpec(tone_band_hz=(100, 9000)), 1)


def test_splitmix_reference():
    # first outputs of the reference splitmix64 generator seeded with 0
    assert splitmix64(0) == 0xE220A8397B1DCDAF
    state = 0x9E3779B97F4A7C15
    assert splitmix64(state) == 0x6E789E6AA1B965F4


def test_corpus_ids_and_seeds():
    spec = SynthSpec(num_clips=3, clip_seconds=0.1)
    c = build_corpus(spec, 5)
    assert [p.clip_id for p in c.pairs] == ["clip-0000", "clip-0001", "clip-0002"]
    assert [p.seed for p in c.pairs] == [derive_seed(5, i) for i in range(3)]
    other = build_corpus(spec, 6)
    assert np.max(np.abs(c.pairs[0].noisy.samples - other.pairs[0].noisy.samples)) > 0


def test_corpus_identical_across_processes():
    code = ("from nase.audio_io import *; import hashlib;"
            "c = build_corpus(SynthSpec(num_clips=2, clip_seconds=0.1), 11);"
            "print(hashlib.sha256(b''.join(p.noisy.samples.tobytes() for p in c.pairs)).hexdigest())")
    outs = {subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True).stdout
            for _ in range(2)}
    assert len(outs) == 1


def test_manifest_roundtrip(tmp_path):
    c = build_corpus(SynthSpec(num_clips=2, clip_seconds=0.1), 3)
    path = write_corpus(c, tmp_path)
    assert sorted(f.name for f in tmp_path.glob("*.wav")) == [
        "clip-0000_clean.wav", "clip-0000_noisy.wav", "clip-0001_clean.wav", "clip-0001_noisy.wav"]
    back = load_corpus(path)
    assert back.seed == 3 and back.generation_config == c.generation_config
    for a, b in zip(c.pairs, back.pairs):
        assert np.max(np.abs(a.noisy.samples - b.noisy.samples)) <= 1 / 32768
        assert a.tone_freqs_hz == b.tone_freqs_hz


def test_load_missing_manifest(tmp_path):
    with pytest.raises(ConfigError):
        load_corpus(tmp_path)
