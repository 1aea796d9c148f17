"""Attack detection, perturbation signature, hard-reset guard and AES-GCM sealing."""

from __future__ import annotations

import enum
import functools
import hashlib
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .audio_io import AudioBuffer
from .dsp import StftParams, snr_db, split, stft
from .errors import AuthError, ConfigError, FormatError, InvalidKeyError, IoError, StateError

KEY_ENV = "NASE_KEY_FILE"


@dataclass(frozen=True)
class DetectorConfig:
    snr_threshold_db: float = 8.0
    mode: str = "oracle"
    window: int = 16

    def __post_init__(self):
        if self.mode not in ("oracle", "blind"):
            raise ConfigError(f"unknown detector mode {self.mode!r}")
        if self.window < 1:
            raise ConfigError("smoothing window must be >= 1")


@dataclass(frozen=True)
class Verdict:
    attacked: bool
    snr_estimate_db: float
    classified: str = "unknown"
    clip_id: str = ""

    def __post_init__(self):
        if not self.attacked and self.classified != "unknown":
            raise ConfigError("a clean verdict cannot carry an attack class")


def _interior(power: np.ndarray, params: StftParams) -> np.ndarray:
    # edge frames overlap the zero padding and would drag the minimum down
    k = params.front_pad // params.hop + 1
    return power[k:-k] if power.shape[0] > 2 * k + 1 else power


def _smoothed_min(power: np.ndarray, window: int) -> np.ndarray:
    from scipy.ndimage import uniform_filter1d

    return uniform_filter1d(power, size=min(window, power.shape[0]), axis=0, mode="nearest").min(axis=0)


@functools.lru_cache(maxsize=64)
def _min_stat_bias(n_samples: int, window: int, params: StftParams) -> float:
    """Mean / E[smoothed minimum] for white noise, found by fixed-seed simulation."""
    rng = np.random.default_rng(0x5EED)
    ratios = []
    for _ in range(4):
        buf = AudioBuffer(0.1 * rng.standard_normal(n_samples))
        power = _interior(split(stft(buf, params))[0].mags ** 2, params)
        ratios.append(power.mean() / _smoothed_min(power, window).mean())
    return float(np.mean(ratios))


def blind_snr_db(composite: AudioBuffer, window: int = 16, params: StftParams = StftParams()) -> float:
    """SNR estimate from the composite alone.

    The noise floor per bin is the bias-compensated minimum over time of the
    power smoothed with a ``window``-frame moving average, capped by the
    median across neighbouring bins (stationary tones never leave a per-bin
    minimum).
    """
    from scipy.ndimage import median_filter

    power = split(stft(composite, params))[0].mags ** 2
    inner = _interior(power, params)
    floor = _min_stat_bias(len(composite), window, params) * _smoothed_min(inner, window)
    floor = np.minimum(floor, median_filter(inner.mean(axis=0), size=31, mode="nearest"))
    noise = floor.sum() * inner.shape[0]
    if noise <= 0:
        return float("inf")
    signal = max(inner.sum() - noise, 1e-300)
    return float(10 * np.log10(signal / noise))


def detect(clean_ref, composite, cfg: DetectorConfig = DetectorConfig(), clip_id: str = "",
           delta_est=None, epsilon_hint: float = 0.0, sample_rate_hz: int = 16000) -> Verdict:
    """Threshold the composite's SNR; optionally classify the perturbation estimate.

    Signals may be AudioBuffers or raw sample arrays.
    """
    if cfg.mode == "oracle":
        if clean_ref is None:
            raise ConfigError("oracle detection needs the clean reference")
        snr = snr_db(clean_ref, composite)
    else:
        if not isinstance(composite, AudioBuffer):
            composite = AudioBuffer(composite, sample_rate_hz)
        snr = blind_snr_db(composite, cfg.window)
    attacked = bool(snr < cfg.snr_threshold_db)
    label = "unknown"
    if attacked and delta_est is not None:
        label = classify_perturbation(delta_est, epsilon_hint)
    return Verdict(attacked, float(snr), label, clip_id)


def saturation_fraction(delta_est) -> float:
    """Fraction of nonzero entries whose magnitude is within 10% of the largest."""
    a = np.abs(np.asarray(delta_est, dtype=np.float64)).ravel()
    peak = a.max(initial=0.0)
    if peak == 0:
        return 0.0
    a = a[a > 0]
    return float(np.mean(a >= 0.9 * peak))


def classify_perturbation(delta_est, epsilon_hint: float = 0.0) -> str:
    """Sign-saturated deltas look like FGSM, interior-valued ones like PGD.

    ``epsilon_hint`` is accepted for interface symmetry; the statistic is
    relative to the delta's own peak, which keeps the label scale-invariant.
    """
    d = np.asarray(delta_est, dtype=np.float64)
    if not np.all(np.isfinite(d)):
        raise ConfigError("delta estimate must be finite")
    if not np.any(d):
        return "unknown"
    frac = saturation_fraction(d)
    if frac > 0.8:
        return "fgsm_like"
    if frac < 0.5:
        return "pgd_like"
    return "unknown"


# --- guard ------------------------------------------------------------------

class Phase(str, enum.Enum):
    IDLE = "IDLE"
    RUNNING = "RUNNING"
    HARD_RESET = "HARD_RESET"


@dataclass(frozen=True)
class GuardState:
    state: Phase = Phase.IDLE
    flag_fgsm: bool = False
    flag_pgd: bool = False

    def __post_init__(self):
        if (self.flag_fgsm or self.flag_pgd) and self.state is not Phase.HARD_RESET:
            raise StateError("error flags may only be raised in HARD_RESET")


START, ACK_RESET, FAULT = "start", "ack_reset", "fault"


def step_guard(g: GuardState, event) -> GuardState:
    """Advance the guard. ``event`` is ``"start"``, ``"ack_reset"``, ``"fault"`` or a Verdict.

    ``fault`` (internal error) forces HARD_RESET without attack flags; from
    HARD_RESET it keeps whatever flags were latched.
    """
    if isinstance(event, Verdict):
        if g.state is not Phase.RUNNING:
            raise StateError(f"verdict received in {g.state.value}")
        if not event.attacked:
            return g
        return GuardState(Phase.HARD_RESET, event.classified == "fgsm_like", event.classified == "pgd_like")
    if event == START and g.state is Phase.IDLE:
        return GuardState(Phase.RUNNING)
    if event == ACK_RESET and g.state is Phase.HARD_RESET:
        return GuardState(Phase.IDLE)
    if event == FAULT:
        return g if g.state is Phase.HARD_RESET else GuardState(Phase.HARD_RESET)
    raise StateError(f"illegal event {event!r} in {g.state.value}")


# --- AES ----------------------------------------------------------------------

MAGIC = b"NASE"
VERSION = 1
NONCE_LEN = 12
TAG_LEN = 16


@dataclass(frozen=True)
class EncryptedBlob:
    nonce: bytes
    ciphertext: bytes
    tag: bytes
    version: int = VERSION

    def header(self) -> bytes:
        return MAGIC + struct.pack("B", self.version)

    def to_bytes(self) -> bytes:
        return self.header() + self.nonce + self.ciphertext + self.tag

    @classmethod
    def from_bytes(cls, raw: bytes) -> "EncryptedBlob":
        if len(raw) < 5 + NONCE_LEN + TAG_LEN or raw[:4] != MAGIC:
            raise FormatError("not a NASE blob")
        version = raw[4]
        nonce = raw[5:5 + NONCE_LEN]
        return cls(nonce, raw[5 + NONCE_LEN:-TAG_LEN], raw[-TAG_LEN:], version)


def _check_key(key: bytes) -> None:
    if len(key) not in (16, 32):
        raise InvalidKeyError(f"AES key must be 16 or 32 bytes, got {len(key)}")


def aes_block_encrypt(key: bytes, block: bytes) -> bytes:
    """Raw single-block AES (the cipher core under GCM)."""
    _check_key(key)
    if len(block) != 16:
        raise InvalidKeyError("AES block must be 16 bytes")
    enc = Cipher(algorithms.AES(key), modes.ECB()).encryptor()
    return enc.update(block) + enc.finalize()


def aes_encrypt(key: bytes, nonce: bytes, plaintext: bytes) -> EncryptedBlob:
    _check_key(key)
    if len(nonce) != NONCE_LEN:
        raise InvalidKeyError(f"nonce must be {NONCE_LEN} bytes, got {len(nonce)}")
    header = MAGIC + struct.pack("B", VERSION)
    sealed = AESGCM(key).encrypt(nonce, bytes(plaintext), header)
    return EncryptedBlob(bytes(nonce), sealed[:-TAG_LEN], sealed[-TAG_LEN:])


def aes_decrypt(key: bytes, blob: EncryptedBlob) -> bytes:
    _check_key(key)
    if blob.version != VERSION or len(blob.nonce) != NONCE_LEN or len(blob.tag) != TAG_LEN:
        raise AuthError("blob header does not authenticate")
    try:
        return AESGCM(key).decrypt(blob.nonce, blob.ciphertext + blob.tag, blob.header())
    except InvalidTag as exc:
        raise AuthError("authentication failed") from exc


def derive_nonce(seed: int, clip_id: str, plaintext: bytes) -> bytes:
    """Deterministic nonce bound to the message, so reruns reproduce ciphertext
    while distinct messages never share a nonce under one key."""
    h = hashlib.sha256(b"nase-nonce\0" + struct.pack("<Q", seed & (2**64 - 1))
                       + clip_id.encode() + b"\0" + hashlib.sha256(plaintext).digest())
    return h.digest()[:NONCE_LEN]


def load_key(path=None) -> bytes:
    """Key from ``path`` or ``$NASE_KEY_FILE``: 16/32 raw bytes or hex text."""
    path = path or os.environ.get(KEY_ENV)
    if not path:
        raise ConfigError(f"no AES key: set {KEY_ENV} or key_file in the config")
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read key file {path}: {exc}") from exc
    try:
        decoded = bytes.fromhex(raw.decode("ascii").strip())
    except (UnicodeDecodeError, ValueError):
        decoded = None
    if decoded is not None and len(decoded) in (16, 32):
        return decoded
    if len(raw) not in (16, 32):
        raise InvalidKeyError(f"{path}: key is neither raw 16/32 bytes nor hex")
    return raw


def write_key(path, n_bytes: int = 32) -> Path:
    path = Path(path)
    try:
        path.write_text(os.urandom(n_bytes).hex() + "\n")
        path.chmod(0o600)
    except OSError as exc:
        raise IoError(f"cannot write key file {path}: {exc}") from exc
    return path
