"""STFT analysis/synthesis, polar split and recombination, SNR and THD."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio_io import AudioBuffer
from .errors import ConfigError, DegenerateSignalError, FormatError, IoError, ShapeError

_WINDOWS = ("hann", "rect")


def window(kind: str, n: int) -> np.ndarray:
    if kind == "hann":
        # periodic Hann: exact overlap-add under hops that divide n/2
        return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)
    if kind == "rect":
        return np.ones(n)
    raise ConfigError(f"unknown window {kind!r}")


@dataclass(frozen=True)
class StftParams:
    frame_len: int = 512
    hop: int = 128
    window: str = "hann"

    def __post_init__(self):
        if self.window not in _WINDOWS:
            raise ConfigError(f"unknown window {self.window!r}")
        if self.frame_len < 2 or self.frame_len % 2:
            raise ConfigError("frame_len must be even and >= 2")
        if not 0 < self.hop <= self.frame_len:
            raise ConfigError("hop must satisfy 0 < hop <= frame_len")
        dev = self.ola_deviation()
        if dev > 1e-10:
            raise ConfigError(
                f"{self.window} window with hop {self.hop} is not overlap-add exact (deviation {dev:.2e})")

    @property
    def fft_len(self) -> int:
        return self.frame_len

    @property
    def n_bins(self) -> int:
        return self.frame_len // 2 + 1

    @property
    def front_pad(self) -> int:
        return self.frame_len - self.hop

    def win(self) -> np.ndarray:
        return window(self.window, self.frame_len)

    def ola_deviation(self) -> float:
        """Relative ripple of the overlapped window sum at steady state."""
        w = self.win()
        acc = np.zeros(self.hop)
        for start in range(0, self.frame_len, self.hop):
            seg = w[start:start + self.hop]
            acc[: seg.size] += seg
        return float((acc.max() - acc.min()) / acc.max())

    def n_frames(self, origin_len: int) -> int:
        padded = self.front_pad + max(origin_len, 1) + self.front_pad
        return int(np.ceil((padded - self.frame_len) / self.hop)) + 1


@dataclass(frozen=True, eq=False)
class Spectrogram:
    frames: np.ndarray
    params: StftParams
    origin_len: int
    sample_rate_hz: int = 16000

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.complex128)
        if f.ndim != 2 or f.shape[0] < 1 or f.shape[1] != self.params.n_bins:
            raise ShapeError(f"spectrogram shape {f.shape} incompatible with {self.params}")
        if not np.all(np.isfinite(f)):
            raise ConfigError("spectrogram contains non-finite values")
        object.__setattr__(self, "frames", f)

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames.shape


@dataclass(frozen=True, eq=False)
class MagnitudeGrid:
    mags: np.ndarray
    params: StftParams
    origin_len: int
    sample_rate_hz: int = 16000

    def __post_init__(self):
        m = np.asarray(self.mags, dtype=np.float64)
        if m.ndim != 2:
            raise ShapeError("magnitude grid must be 2-D")
        if not np.all(np.isfinite(m)) or np.any(m < 0):
            raise ConfigError("magnitudes must be finite and nonnegative")
        object.__setattr__(self, "mags", m)

    @property
    def shape(self) -> tuple[int, int]:
        return self.mags.shape

    def with_values(self, mags: np.ndarray) -> "MagnitudeGrid":
        return MagnitudeGrid(mags, self.params, self.origin_len, self.sample_rate_hz)


@dataclass(frozen=True, eq=False)
class PhaseGrid:
    phases: np.ndarray
    params: StftParams
    origin_len: int
    sample_rate_hz: int = 16000

    def __post_init__(self):
        p = np.asarray(self.phases, dtype=np.float64)
        if p.ndim != 2:
            raise ShapeError("phase grid must be 2-D")
        if np.any(p <= -np.pi - 1e-15) or np.any(p > np.pi):
            raise ConfigError("phases must lie in (-pi, pi]")
        object.__setattr__(self, "phases", p)

    @property
    def shape(self) -> tuple[int, int]:
        return self.phases.shape

    def with_values(self, phases: np.ndarray) -> "PhaseGrid":
        return PhaseGrid(phases, self.params, self.origin_len, self.sample_rate_hz)


def stft(buf: AudioBuffer, params: StftParams = StftParams()) -> Spectrogram:
    """Windowed rfft frames of the signal.

    The signal is zero-padded by ``frame_len - hop`` at both ends (then to a
    whole number of hops) so every original sample is covered by the same
    number of frames and synthesis is exact at the edges.
    """
    x = np.asarray(buf.samples, dtype=np.float64)
    n_frames = params.n_frames(x.size)
    total = params.frame_len + (n_frames - 1) * params.hop
    padded = np.zeros(total)
    padded[params.front_pad: params.front_pad + x.size] = x
    idx = np.arange(params.frame_len)[None, :] + params.hop * np.arange(n_frames)[:, None]
    frames = np.fft.rfft(padded[idx] * params.win()[None, :], axis=1)
    return Spectrogram(frames, params, x.size, buf.sample_rate_hz)


def istft(spec: Spectrogram, params: StftParams | None = None) -> AudioBuffer:
    """Weighted overlap-add inverse of :func:`stft`, truncated to the original length."""
    params = spec.params if params is None else params
    if params != spec.params or spec.frames.shape[1] != params.n_bins:
        raise ShapeError(f"spectrogram built with {spec.params}, asked to invert with {params}")
    return AudioBuffer(istft_raw(spec), spec.sample_rate_hz)


def istft_raw(spec: Spectrogram) -> np.ndarray:
    """Unclamped inverse; used where clipping to [-1, 1] would bias a metric."""
    p = spec.params
    w = p.win()
    n_frames = spec.frames.shape[0]
    total = p.frame_len + (n_frames - 1) * p.hop
    seg = np.fft.irfft(spec.frames, n=p.frame_len, axis=1) * w[None, :]
    out = np.zeros(total)
    norm = np.zeros(total)
    for t in range(n_frames):
        sl = slice(t * p.hop, t * p.hop + p.frame_len)
        out[sl] += seg[t]
        norm[sl] += w**2
    lo = p.front_pad
    region = norm[lo:lo + spec.origin_len]
    if region.size != spec.origin_len or np.any(region < 1e-12):
        raise ShapeError("spectrogram does not cover its declared origin length")
    return out[lo:lo + spec.origin_len] / region


def split(spec: Spectrogram) -> tuple[MagnitudeGrid, PhaseGrid]:
    mags = np.abs(spec.frames)
    phases = np.where(mags == 0.0, 0.0, np.angle(spec.frames))
    # np.angle returns -pi for (-x, -0.0); fold onto +pi to stay in (-pi, pi]
    phases = np.where(phases <= -np.pi, np.pi, phases)
    return (MagnitudeGrid(mags, spec.params, spec.origin_len, spec.sample_rate_hz),
            PhaseGrid(phases, spec.params, spec.origin_len, spec.sample_rate_hz))


def mix(mag: MagnitudeGrid, phase: PhaseGrid) -> Spectrogram:
    """Recombine magnitude and phase into complex frames."""
    if mag.shape != phase.shape or mag.params != phase.params or mag.origin_len != phase.origin_len:
        raise ShapeError(f"cannot mix magnitude {mag.shape} with phase {phase.shape}")
    frames = mag.mags * np.exp(1j * phase.phases)
    return Spectrogram(frames, mag.params, mag.origin_len, mag.sample_rate_hz)


def _samples(x) -> np.ndarray:
    return np.asarray(x.samples if isinstance(x, AudioBuffer) else x, dtype=np.float64)


def snr_db(reference, test) -> float:
    """Full-clip time-domain SNR in dB; ``inf`` when the signals are identical."""
    ref, tst = _samples(reference), _samples(test)
    if ref.shape != tst.shape:
        raise ShapeError(f"length mismatch {ref.size} vs {tst.size}")
    sig = float(np.sum(ref**2))
    if sig == 0.0:
        raise DegenerateSignalError("reference has zero energy")
    err = float(np.sum((tst - ref) ** 2))
    if err == 0.0:
        return float("inf")
    return 10.0 * np.log10(sig / err)


def _peak_amplitude(spectrum: np.ndarray, bin_pos: float) -> float:
    k = int(round(bin_pos))
    lo, hi = max(k - 2, 1), min(k + 3, spectrum.size - 1)
    if lo >= hi:
        return float(spectrum[min(max(k, 0), spectrum.size - 1)])
    j = lo + int(np.argmax(spectrum[lo:hi]))
    if j <= 0 or j >= spectrum.size - 1:
        return float(spectrum[j])
    a, b, c = (np.log(max(v, 1e-300)) for v in spectrum[j - 1:j + 2])
    denom = a - 2 * b + c
    if denom >= 0:
        return float(spectrum[j])
    p = float(np.clip(0.5 * (a - c) / denom, -0.5, 0.5))
    return float(np.exp(b - 0.25 * (a - c) * p))


def thd(buf, fundamental_hz: float, sample_rate_hz: int | None = None) -> float:
    """Harmonic RMS over fundamental amplitude from one Hann-windowed DFT.

    Harmonic peaks are refined with log-parabolic interpolation over the
    neighbouring bins; harmonics up to Nyquist are included.
    """
    x = _samples(buf)
    fs = buf.sample_rate_hz if isinstance(buf, AudioBuffer) else sample_rate_hz
    if fs is None:
        raise ConfigError("sample rate required for raw arrays")
    nyq = fs / 2
    if not 0 < fundamental_hz or 2 * fundamental_hz >= nyq:
        raise ConfigError(f"fundamental {fundamental_hz} Hz leaves no harmonic below Nyquist")
    n = x.size
    spectrum = np.abs(np.fft.rfft(x * np.hanning(n + 1)[:n]))
    df = fs / n
    a1 = _peak_amplitude(spectrum, fundamental_hz / df)
    if a1 < 1e-12:
        raise DegenerateSignalError("no energy at the fundamental")
    n_harm = int(np.floor(nyq / fundamental_hz))
    harm = [_peak_amplitude(spectrum, h * fundamental_hz / df)
            for h in range(2, n_harm + 1) if h * fundamental_hz < nyq - 2 * df]
    return float(np.sqrt(np.sum(np.square(harm))) / a1)


def dominant_frequency(buf: AudioBuffer) -> float:
    x = buf.samples
    spectrum = np.abs(np.fft.rfft(x * np.hanning(x.size)))
    spectrum[0] = 0.0
    return float(np.argmax(spectrum) * buf.sample_rate_hz / x.size)


# --- SPG1 container ------------------------------------------------------------
# magic "SPG1" | u8 kind (0 complex, 1 real) | u8 window code | u16 reserved
# | u32 T | u32 F | u32 frame_len | u32 hop | u64 origin_len | u32 sample_rate
# | T*F (complex: 2*T*F interleaved re/im) little-endian float64
_SPG_HEAD = struct.Struct("<4sBBHIIIIQI")


def save_spg(obj, path) -> None:
    """Serialize a Spectrogram, MagnitudeGrid, PhaseGrid or raw real grid bundle."""
    if isinstance(obj, Spectrogram):
        kind, data = 0, np.ascontiguousarray(obj.frames).view(np.float64)
    elif isinstance(obj, MagnitudeGrid):
        kind, data = 1, obj.mags
    elif isinstance(obj, PhaseGrid):
        kind, data = 1, obj.phases
    else:
        raise ConfigError(f"cannot serialize {type(obj).__name__}")
    t, f = obj.shape
    p = obj.params
    head = _SPG_HEAD.pack(b"SPG1", kind, _WINDOWS.index(p.window), 0, t, f,
                          p.frame_len, p.hop, obj.origin_len, obj.sample_rate_hz)
    try:
        Path(path).write_bytes(head + np.asarray(data, dtype="<f8").tobytes())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def save_real_grid(values: np.ndarray, params: StftParams, origin_len: int, path,
                   sample_rate_hz: int = 16000) -> None:
    v = np.asarray(values, dtype=np.float64)
    t, f = v.shape
    head = _SPG_HEAD.pack(b"SPG1", 1, _WINDOWS.index(params.window), 0, t, f,
                          params.frame_len, params.hop, origin_len, sample_rate_hz)
    Path(path).write_bytes(head + v.astype("<f8").tobytes())


def load_spg(path):
    """Returns a Spectrogram for complex payloads, else ``(grid, params, origin_len)``."""
    raw = Path(path).read_bytes()
    if len(raw) < _SPG_HEAD.size or raw[:4] != b"SPG1":
        raise FormatError(f"{path}: not an SPG1 container")
    _, kind, wcode, _, t, f, frame_len, hop, origin_len, fs = _SPG_HEAD.unpack_from(raw)
    params = StftParams(frame_len, hop, _WINDOWS[wcode])
    count = t * f * (2 if kind == 0 else 1)
    body = np.frombuffer(raw, dtype="<f8", offset=_SPG_HEAD.size)
    if body.size != count:
        raise FormatError(f"{path}: payload size {body.size} != {count}")
    if kind == 0:
        return Spectrogram(body.view(np.complex128).reshape(t, f), params, origin_len, fs)
    return body.reshape(t, f).copy(), params, origin_len
