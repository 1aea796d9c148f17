"""WAV ingest/emit and the seeded synthetic tone-plus-noise corpus."""

from __future__ import annotations

import json
import wave
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, IoError, UnsupportedError

DEFAULT_SAMPLE_RATE = 16000
CLEAN_RMS = 0.3
_MASK64 = (1 << 64) - 1


@dataclass(frozen=True, eq=False)
class AudioBuffer:
    samples: np.ndarray
    sample_rate_hz: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if s.size < 1:
            raise ConfigError("AudioBuffer needs at least one sample")
        if not np.all(np.isfinite(s)):
            raise ConfigError("AudioBuffer samples must be finite")
        if int(self.sample_rate_hz) <= 0:
            raise ConfigError(f"sample rate must be positive, got {self.sample_rate_hz}")
        s = np.clip(s, -1.0, 1.0)
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)
        object.__setattr__(self, "sample_rate_hz", int(self.sample_rate_hz))

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz


@dataclass(frozen=True)
class SynthSpec:
    num_clips: int = 200
    clip_seconds: float = 2.0
    num_tones: int = 3
    tone_band_hz: tuple[float, float] = (200.0, 2000.0)
    noise_kind: str = "white"
    target_snr_db: float = 10.0
    sample_rate_hz: int = DEFAULT_SAMPLE_RATE

    def validate(self, min_samples: int = 512) -> None:
        low, high = self.tone_band_hz
        if not 0 < low < high <= self.sample_rate_hz / 2:
            raise ConfigError(f"tone band {self.tone_band_hz} infeasible at {self.sample_rate_hz} Hz")
        if self.num_tones < 1:
            raise ConfigError("num_tones must be >= 1 (clean signal would be silent)")
        if self.noise_kind not in ("white", "pink"):
            raise ConfigError(f"unknown noise kind {self.noise_kind!r}")
        if self.clip_seconds * self.sample_rate_hz < min_samples:
            raise ConfigError("clip shorter than one STFT frame")
        if self.num_clips < 1:
            raise ConfigError("num_clips must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tone_band_hz"] = list(self.tone_band_hz)
        return d


@dataclass(frozen=True)
class ClipPair:
    clean: AudioBuffer
    noisy: AudioBuffer
    clip_id: str
    target_snr_db: float
    seed: int = 0
    tone_freqs_hz: tuple[float, ...] = ()

    def __post_init__(self):
        if len(self.clean) != len(self.noisy) or self.clean.sample_rate_hz != self.noisy.sample_rate_hz:
            raise ConfigError(f"{self.clip_id}: clean and noisy differ in length or rate")


@dataclass(frozen=True)
class Corpus:
    pairs: tuple[ClipPair, ...]
    seed: int
    generation_config: SynthSpec | None = None
    manifest_path: Path | None = field(default=None, compare=False)

    def __post_init__(self):
        if not self.pairs:
            raise ConfigError("corpus is empty")
        ids = [p.clip_id for p in self.pairs]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate clip ids in corpus")

    def __len__(self) -> int:
        return len(self.pairs)


# --- WAV -----------------------------------------------------------------

def read_wav(path) -> AudioBuffer:
    """Read 16-bit PCM WAV; stereo is averaged down to mono."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as w:
            width = w.getsampwidth()
            channels = w.getnchannels()
            rate = w.getframerate()
            raw = w.readframes(w.getnframes())
    except FileNotFoundError as exc:
        raise IoError(f"no such file: {path}") from exc
    except wave.Error as exc:
        if "unknown format" in str(exc):
            raise UnsupportedError(f"{path}: {exc}") from exc
        raise FormatError(f"{path}: {exc}") from exc
    except EOFError as exc:
        raise FormatError(f"{path}: truncated header") from exc
    if width != 2:
        raise UnsupportedError(f"{path}: {8 * width}-bit audio, only 16-bit PCM is supported")
    if channels < 1:
        raise FormatError(f"{path}: zero channels")
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64)
    if pcm.size % channels:
        raise FormatError(f"{path}: sample count not a multiple of channel count")
    pcm = pcm.reshape(-1, channels).mean(axis=1)
    if pcm.size == 0:
        raise FormatError(f"{path}: no samples")
    return AudioBuffer(pcm / 32768.0, rate)


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0) * 32768.0
    # round half away from zero
    q = np.sign(x) * np.floor(np.abs(x) + 0.5)
    return np.clip(q, -32768, 32767).astype("<i2")


def write_wav(buf: AudioBuffer, path) -> None:
    path = Path(path)
    try:
        with open(path, "wb") as fh, wave.open(fh, "wb") as w:
            w.setnchannels(1)
            w.setsampwidth(2)
            w.setframerate(buf.sample_rate_hz)
            w.writeframes(to_pcm16(buf.samples).tobytes())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


# --- synthesis -------------------------------------------------------------

def splitmix64(state: int) -> int:
    z = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, index: int) -> int:
    """Per-clip seed: splitmix64 applied to the corpus seed advanced by ``index`` golden steps."""
    return splitmix64((int(seed) + index * 0x9E3779B97F4A7C15) & _MASK64)


def _pink(rng: np.random.Generator, n: int) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(spec.size, dtype=np.float64)
    f[0] = 1.0
    return np.fft.irfft(spec / np.sqrt(f), n)


def _energy_snr_db(clean: np.ndarray, noisy: np.ndarray) -> float:
    return 10.0 * np.log10(np.sum(clean**2) / np.sum((noisy - clean) ** 2))


def synth_clip(spec: SynthSpec, clip_seed: int, clip_id: str = "clip") -> ClipPair:
    spec.validate()
    rng = np.random.default_rng(int(clip_seed) & _MASK64)
    fs = spec.sample_rate_hz
    n = int(round(spec.clip_seconds * fs))
    t = np.arange(n) / fs
    low, high = spec.tone_band_hz
    freqs = np.sort(rng.uniform(low, high, spec.num_tones))
    phases = rng.uniform(-np.pi, np.pi, spec.num_tones)
    clean = np.sin(2 * np.pi * freqs[:, None] * t[None, :] + phases[:, None]).sum(axis=0)
    clean *= CLEAN_RMS / np.sqrt(np.mean(clean**2))

    noise = rng.standard_normal(n) if spec.noise_kind == "white" else _pink(rng, n)
    scale = np.sqrt(np.sum(clean**2) / (np.sum(noise**2) * 10 ** (spec.target_snr_db / 10)))
    noisy = np.clip(clean + scale * noise, -1.0, 1.0)
    clean = np.clip(clean, -1.0, 1.0)
    if abs(_energy_snr_db(clean, noisy) - spec.target_snr_db) > 0.5:
        raise ConfigError(f"{clip_id}: SNR target unreachable without clipping")
    return ClipPair(
        clean=AudioBuffer(clean, fs),
        noisy=AudioBuffer(noisy, fs),
        clip_id=clip_id,
        target_snr_db=spec.target_snr_db,
        seed=int(clip_seed),
        tone_freqs_hz=tuple(float(f) for f in freqs),
    )


def clip_name(i: int) -> str:
    return f"clip-{i:04d}"


def build_corpus(spec: SynthSpec, seed: int) -> Corpus:
    spec.validate()
    pairs = tuple(synth_clip(spec, derive_seed(seed, i), clip_name(i)) for i in range(spec.num_clips))
    return Corpus(pairs=pairs, seed=int(seed), generation_config=spec)


# --- manifest ----------------------------------------------------------------

def write_corpus(corpus: Corpus, out_dir) -> Path:
    """Write ``<id>_clean.wav``/``<id>_noisy.wav`` pairs plus ``manifest.json``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {out}: {exc}") from exc
    entries = []
    for p in corpus.pairs:
        clean_name, noisy_name = f"{p.clip_id}_clean.wav", f"{p.clip_id}_noisy.wav"
        write_wav(p.clean, out / clean_name)
        write_wav(p.noisy, out / noisy_name)
        entries.append({
            "clip_id": p.clip_id,
            "seed": p.seed,
            "target_snr_db": p.target_snr_db,
            "tone_freqs_hz": list(p.tone_freqs_hz),
            "clean": clean_name,
            "noisy": noisy_name,
        })
    manifest = {
        "format": "nase-corpus/1",
        "seed": corpus.seed,
        "generation_config": corpus.generation_config.to_dict() if corpus.generation_config else None,
        "clips": entries,
    }
    path = out / "manifest.json"
    try:
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    return path


def load_corpus(path) -> Corpus:
    """Load from a manifest file or a directory containing ``manifest.json``."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise ConfigError(f"corpus manifest not found: {path}")
    try:
        m = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    gc = m.get("generation_config")
    spec = None
    if gc:
        gc = dict(gc, tone_band_hz=tuple(gc["tone_band_hz"]))
        spec = SynthSpec(**gc)
    base = path.parent
    pairs = tuple(
        ClipPair(
            clean=read_wav(base / e["clean"]),
            noisy=read_wav(base / e["noisy"]),
            clip_id=e["clip_id"],
            target_snr_db=float(e["target_snr_db"]),
            seed=int(e["seed"]),
            tone_freqs_hz=tuple(e.get("tone_freqs_hz", ())),
        )
        for e in m["clips"]
    )
    return Corpus(pairs=pairs, seed=int(m["seed"]), generation_config=spec, manifest_path=path)
