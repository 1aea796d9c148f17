"""End-to-end flow: split, delay, attack, mix, detect, then seal or denoise."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import attack as atk
from .audio_io import AudioBuffer, ClipPair, Corpus, to_pcm16
from .defense import (
    ACK_RESET, FAULT, START, DetectorConfig, EncryptedBlob, GuardState, Phase, Verdict,
    aes_decrypt, aes_encrypt, derive_nonce, detect, saturation_fraction, step_guard,
)
from .dsp import MagnitudeGrid, PhaseGrid, StftParams, dominant_frequency, istft_raw, mix, snr_db, split, stft, thd
from .errors import ConfigError, NaseError
from .snn import SnnDenoiser, SpectralSubtractDenoiser, SpikeTrace, load_checkpoint, spike_rate

log = logging.getLogger(__name__)

TARGET_SNR_DB = 5.395
WALL_CLOCK_FIELDS = frozenset({"wall_latency_ms", "stage_ms", "mean_latency_ms", "mean_stage_ms",
                               "latency_ms", "elapsed_s"})


@dataclass(frozen=True)
class PipelineConfig:
    stft: StftParams = field(default_factory=StftParams)
    denoiser: str = "spectral_subtract"
    checkpoint: str | None = None
    attack: atk.AttackSpec = field(default_factory=lambda: atk.AttackSpec(kind="fgsm"))
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    delay_frames: int = 1
    batch_size: int = 32
    key_file: str | None = None
    seed: int = 0
    encrypt_at_ingest: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.delay_frames < 0:
            raise ConfigError("delay_frames must be >= 0")
        if self.denoiser not in ("snn", "spectral_subtract"):
            raise ConfigError(f"unknown denoiser {self.denoiser!r}")
        if self.denoiser == "snn" and not self.checkpoint:
            raise ConfigError("denoiser 'snn' needs a checkpoint path")

    def to_dict(self) -> dict:
        return {
            "stft": {"frame_len": self.stft.frame_len, "hop": self.stft.hop, "window": self.stft.window},
            "denoiser": self.denoiser,
            "checkpoint": self.checkpoint,
            "attack": self.attack.to_dict(),
            "detector": {"snr_threshold_db": self.detector.snr_threshold_db, "mode": self.detector.mode,
                         "window": self.detector.window},
            "delay_frames": self.delay_frames,
            "batch_size": self.batch_size,
            "key_file": self.key_file,
            "seed": self.seed,
            "encrypt_at_ingest": self.encrypt_at_ingest,
        }


@dataclass
class ClipOutcome:
    clip_id: str
    attacked_truth: bool
    attack_kind: str
    verdict: Verdict
    output: AudioBuffer | EncryptedBlob
    guard: GuardState
    snr_in_db: float
    snr_out_db: float | None
    thd: float | None
    spike_rate: float | None
    trace: SpikeTrace | None
    delta_linf: float
    saturation: float
    wall_latency_ms: float
    stage_ms: dict = field(default_factory=dict)

    def __post_init__(self):
        if isinstance(self.output, EncryptedBlob) != self.verdict.attacked:
            raise ConfigError(f"{self.clip_id}: output routing disagrees with verdict")


class PipelineFault(NaseError):
    """Internal error while processing a clip; the guard is left in HARD_RESET."""

    category = "State"

    def __init__(self, clip_id: str, guard: GuardState, cause: BaseException):
        super().__init__(f"{clip_id}: {type(cause).__name__}: {cause}")
        self.clip_id = clip_id
        self.guard = guard
        self.cause = cause


def delay(grid, d: int):
    """Shift frames later by ``d`` with zero fill; the frame count is unchanged."""
    if d < 0:
        raise ConfigError("delay must be >= 0")
    values = grid.mags if isinstance(grid, MagnitudeGrid) else grid.phases if isinstance(grid, PhaseGrid) \
        else np.asarray(grid)
    out = np.zeros_like(values)
    if d < values.shape[0]:
        out[d:] = values[: values.shape[0] - d]
    return grid.with_values(out) if hasattr(grid, "with_values") else out


def make_denoiser(cfg: PipelineConfig):
    if cfg.denoiser == "snn":
        return SnnDenoiser(load_checkpoint(cfg.checkpoint))
    return SpectralSubtractDenoiser()



def _ingest_roundtrip(buf: AudioBuffer, key: bytes, seed: int, clip_id: str) -> AudioBuffer:
    pcm = to_pcm16(buf.samples).tobytes()
    blob = aes_encrypt(key, derive_nonce(seed, clip_id + "/ingest", pcm), pcm)
    restored = np.frombuffer(aes_decrypt(key, blob), dtype="<i2") / 32768.0
    return AudioBuffer(restored, buf.sample_rate_hz)


def process_clip(pair: ClipPair, cfg: PipelineConfig, inject_attack: bool, denoiser=None,
                 key: bytes | None = None, attack_spec: atk.AttackSpec | None = None) -> ClipOutcome:
    """Run one clip through the full flow and route it to ciphertext or denoised audio."""
    denoiser = denoiser or make_denoiser(cfg)
    spec = attack_spec or cfg.attack
    guard = step_guard(GuardState(), START)
    stage: dict[str, float] = {}
    t_start = time.perf_counter()

    def lap(name, t0):
        stage[name] = stage.get(name, 0.0) + 1e3 * (time.perf_counter() - t0)

    try:
        noisy, clean = pair.noisy, pair.clean
        if cfg.encrypt_at_ingest:
            if key is None:
                raise ConfigError("encrypt_at_ingest needs a key")
            t0 = time.perf_counter()
            noisy = _ingest_roundtrip(noisy, key, cfg.seed, pair.clip_id)
            lap("encrypt", t0)

        t0 = time.perf_counter()
        noisy_mag, noisy_phase = split(stft(noisy, cfg.stft))
        clean_mag, clean_phase = split(stft(clean, cfg.stft))
        d = cfg.delay_frames
        noisy_mag, noisy_phase = delay(noisy_mag, d), delay(noisy_phase, d)
        clean_mag, clean_phase = delay(clean_mag, d), delay(clean_phase, d)
        clean_ref = istft_raw(mix(clean_mag, clean_phase))
        lap("stft", t0)

        t0 = time.perf_counter()
        if inject_attack and spec.kind != "none":
            pert = atk.synthesize(denoiser, noisy_mag, clean_mag, spec)
        else:
            pert = atk.Perturbation(np.zeros(noisy_mag.shape), replace(spec, kind="none"))
        attacked_mag = atk.apply(noisy_mag, pert)
        lap("attack", t0)

        t0 = time.perf_counter()
        composite = istft_raw(mix(attacked_mag, noisy_phase))
        stage["stft"] += 1e3 * (time.perf_counter() - t0)

        t0 = time.perf_counter()
        delta_est = attacked_mag.mags - noisy_mag.mags
        live = delta_est[attacked_mag.mags > 0]
        if np.sum(clean_ref**2) == 0:
            raise ConfigError(f"{pair.clip_id}: clean reference is silent after delay")
        # unclamped signals so the metric sees exactly what was mixed
        verdict = detect(clean_ref if cfg.detector.mode == "oracle" else None, composite, cfg.detector,
                         pair.clip_id, live, spec.epsilon, sample_rate_hz=noisy.sample_rate_hz)
        snr_in = verdict.snr_estimate_db if cfg.detector.mode == "oracle" else snr_db(clean_ref, composite)
        guard = step_guard(guard, verdict)
        lap("detect", t0)

        snr_out = thd_val = rate = trace = None
        if verdict.attacked:
            if key is None:
                raise ConfigError("no AES key available for sealing a flagged clip")
            t0 = time.perf_counter()
            pcm = to_pcm16(composite).tobytes()
            output = aes_encrypt(key, derive_nonce(cfg.seed, pair.clip_id, pcm), pcm)
            lap("encrypt", t0)
        else:
            t0 = time.perf_counter()
            den_mag, trace = denoiser.denoise(attacked_mag.mags)
            denoised = istft_raw(mix(attacked_mag.with_values(den_mag), noisy_phase))
            lap("denoise", t0)
            output = AudioBuffer(denoised, noisy.sample_rate_hz)
            snr_out = float(snr_db(clean_ref, denoised))
            if trace is not None:
                rate = float(spike_rate(trace))
            try:
                f0 = dominant_frequency(pair.clean)
                thd_val = float(thd(output, f0)) if np.any(denoised) else None
            except NaseError:
                thd_val = None
    except Exception as exc:
        guard = step_guard(guard, FAULT)
        raise PipelineFault(pair.clip_id, guard, exc) from exc

    return ClipOutcome(
        clip_id=pair.clip_id,
        attacked_truth=bool(inject_attack),
        attack_kind=spec.kind if inject_attack else "none",
        verdict=verdict,
        output=output,
        guard=guard,
        snr_in_db=float(snr_in),
        snr_out_db=snr_out,
        thd=thd_val,
        spike_rate=rate,
        trace=trace,
        delta_linf=pert.linf,
        saturation=saturation_fraction(live) if live.size else 0.0,
        wall_latency_ms=1e3 * (time.perf_counter() - t_start),
        stage_ms=stage,
    )


@dataclass
class RunReport:
    detection_rate: float | None
    false_positive_rate: float | None
    mean_snr_attacked_db: float | None
    mean_snr_clean_db: float | None
    mean_snr_out_db: float | None
    mean_thd: float | None
    mean_spike_rate: float | None
    mean_latency_ms: float
    outcomes: list[ClipOutcome]
    faults: list[dict]
    per_attack: dict
    config: dict
    seed: int
    attack_fraction: float

    def to_dict(self) -> dict:
        clips = []
        for o in self.outcomes:
            clips.append({
                "clip_id": o.clip_id,
                "attacked_truth": o.attacked_truth,
                "attack_kind": o.attack_kind,
                "verdict": {
                    "attacked": o.verdict.attacked,
                    "snr_estimate_db": _json_float(o.verdict.snr_estimate_db),
                    "classified": o.verdict.classified,
                },
                "guard": {"state": o.guard.state.value, "flag_fgsm": o.guard.flag_fgsm,
                          "flag_pgd": o.guard.flag_pgd},
                "output": ({"kind": "encrypted", "bytes": len(o.output.to_bytes()),
                            "nonce": o.output.nonce.hex()}
                           if isinstance(o.output, EncryptedBlob) else {"kind": "denoised",
                                                                        "samples": len(o.output)}),
                "snr_in_db": _json_float(o.snr_in_db),
                "snr_out_db": _json_float(o.snr_out_db),
                "thd": o.thd,
                "spike_rate": o.spike_rate,
                "delta_linf": o.delta_linf,
                "saturation_fraction": o.saturation,
                "wall_latency_ms": o.wall_latency_ms,
                "stage_ms": dict(sorted(o.stage_ms.items())),
            })
        return {
            "format": "nase-run-report/1",
            "seed": self.seed,
            "attack_fraction": self.attack_fraction,
            "summary": {
                "detection_rate": self.detection_rate,
                "false_positive_rate": self.false_positive_rate,
                "mean_snr_attacked_db": self.mean_snr_attacked_db,
                "mean_snr_clean_db": self.mean_snr_clean_db,
                "mean_snr_out_db": self.mean_snr_out_db,
                "mean_thd": self.mean_thd,
                "mean_spike_rate": self.mean_spike_rate,
                "mean_latency_ms": self.mean_latency_ms,
                "n_clips": len(self.outcomes) + len(self.faults),
                "n_faults": len(self.faults),
            },
            "per_attack": self.per_attack,
            "config": self.config,
            "clips": clips,
            "faults": self.faults,
        }


def _json_float(x):
    if x is None:
        return None
    if np.isinf(x):
        return "inf" if x > 0 else "-inf"
    return float(x)


def _mean(values):
    vals = [v for v in values if v is not None and np.isfinite(v)]
    return float(np.mean(vals)) if vals else None


def _rate(hits, total):
    return hits / total if total else None


def choose_attacked(n: int, fraction: float, seed: int) -> np.ndarray:
    """Boolean mask marking ``round(fraction * n)`` clips, chosen by seed."""
    if not 0 <= fraction <= 1:
        raise ConfigError("attack fraction must be in [0, 1]")
    k = int(round(fraction * n))
    mask = np.zeros(n, dtype=bool)
    mask[np.random.default_rng([seed, 0xA77AC]).permutation(n)[:k]] = True
    return mask


def assign_attacks(cfg: PipelineConfig, marked: np.ndarray, kinds) -> list[atk.AttackSpec | None]:
    """Per-clip attack specs; marked clips cycle through ``kinds`` in clip order."""
    kinds = list(kinds) if kinds else [cfg.attack.kind]
    specs, j = [], 0
    for m in marked:
        if not m:
            specs.append(None)
            continue
        kind = kinds[j % len(kinds)]
        specs.append(replace(cfg.attack, kind=kind, seed=cfg.attack.seed + j))
        j += 1
    return specs


def summarize(outcomes: list[ClipOutcome], faults: list[dict], cfg: PipelineConfig,
              attack_fraction: float) -> RunReport:
    attacked = [o for o in outcomes if o.attacked_truth]
    clean = [o for o in outcomes if not o.attacked_truth]
    per_attack = {}
    for kind in sorted({o.attack_kind for o in attacked}):
        group = [o for o in attacked if o.attack_kind == kind]
        flagged = [o for o in group if o.verdict.attacked]
        label = {"fgsm": "fgsm_like", "pgd": "pgd_like"}.get(kind)
        per_attack[kind] = {
            "n": len(group),
            "detection_rate": _rate(len(flagged), len(group)),
            "mean_snr_db": _mean(o.snr_in_db for o in group),
            "mean_saturation_fraction": _mean(o.saturation for o in group),
            "mean_delta_linf": _mean(o.delta_linf for o in group),
            "classification_accuracy": _rate(sum(o.verdict.classified == label for o in flagged), len(flagged)),
        }
    return RunReport(
        detection_rate=_rate(sum(o.verdict.attacked for o in attacked), len(attacked)),
        false_positive_rate=_rate(sum(o.verdict.attacked for o in clean), len(clean)),
        mean_snr_attacked_db=_mean(o.snr_in_db for o in attacked),
        mean_snr_clean_db=_mean(o.snr_in_db for o in clean),
        mean_snr_out_db=_mean(o.snr_out_db for o in outcomes),
        mean_thd=_mean(o.thd for o in outcomes),
        mean_spike_rate=_mean(o.spike_rate for o in outcomes),
        mean_latency_ms=float(np.mean([o.wall_latency_ms for o in outcomes])) if outcomes else 0.0,
        outcomes=outcomes,
        faults=faults,
        per_attack=per_attack,
        config=cfg.to_dict(),
        seed=cfg.seed,
        attack_fraction=attack_fraction,
    )


def run_experiment(corpus: Corpus, cfg: PipelineConfig, attack_fraction: float, *, denoiser=None,
                   key: bytes | None = None, attack_kinds=None, progress=None) -> RunReport:
    """Process the corpus in batches of ``cfg.batch_size`` and aggregate the metrics.

    Clips marked for injection are chosen by ``cfg.seed``; ``attack_kinds``
    (e.g. ``["fgsm", "pgd"]``) pools several attacks across the marked clips.
    """
    if corpus is None or not corpus.pairs:
        raise ConfigError("empty corpus")
    denoiser = denoiser or make_denoiser(cfg)
    marked = choose_attacked(len(corpus.pairs), attack_fraction, cfg.seed)
    specs = assign_attacks(cfg, marked, attack_kinds)
    outcomes, faults = [], []
    pairs = corpus.pairs
    for start in range(0, len(pairs), cfg.batch_size):
        for i in range(start, min(start + cfg.batch_size, len(pairs))):
            try:
                o = process_clip(pairs[i], cfg, bool(marked[i]), denoiser, key, specs[i] or cfg.attack)
            except PipelineFault as fault:
                log.error("clip fault: %s", fault)
                faults.append({"clip_id": fault.clip_id, "error": str(fault),
                               "guard": fault.guard.state.value})
                continue
            outcomes.append(o)
            if o.guard.state is Phase.HARD_RESET:
                step_guard(o.guard, ACK_RESET)
        if progress:
            progress(min(start + cfg.batch_size, len(pairs)), len(pairs))
    outcomes.sort(key=lambda o: o.clip_id)
    return summarize(outcomes, faults, cfg, attack_fraction)


def calibrate_epsilon(pairs, cfg: PipelineConfig, denoiser=None, target_db: float = TARGET_SNR_DB,
                      kinds=("fgsm", "pgd"), n_clips: int = 4, iters: int = 6, eps0: float = 1.0,
                      tol_db: float = 0.1) -> float:
    """Pick epsilon so attacked composites sit near ``target_db``.

    Uses the error-power model SNR = S / (N + k * eps^2), refitting ``k``
    after each measurement on the first ``n_clips`` clips.
    """
    denoiser = denoiser or make_denoiser(cfg)
    pairs = list(pairs)[:n_clips]
    if not pairs:
        raise ConfigError("no clips to calibrate on")

    def measure(eps):
        snrs = []
        for j, pair in enumerate(pairs):
            spec = replace(cfg.attack, kind=kinds[j % len(kinds)], epsilon=eps, seed=cfg.attack.seed + j)
            quiet = replace(cfg, detector=replace(cfg.detector, snr_threshold_db=-np.inf))
            snrs.append(process_clip(pair, quiet, True, denoiser, None, spec).snr_in_db)
        return float(np.mean(snrs))

    base = []
    for pair in pairs:
        quiet = replace(cfg, detector=replace(cfg.detector, snr_threshold_db=-np.inf))
        base.append(process_clip(pair, quiet, False, denoiser, None, replace(cfg.attack, kind="none")).snr_in_db)
    noise_ratio = float(np.mean([10 ** (-s / 10) for s in base]))
    want = 10 ** (-target_db / 10)
    if want <= noise_ratio:
        raise ConfigError(f"target {target_db} dB is above the unattacked SNR")
    eps = eps0
    for _ in range(iters):
        got = measure(eps)
        log.info("calibrate: eps=%.4g -> %.3f dB", eps, got)
        if abs(got - target_db) < tol_db:
            break
        k = max(10 ** (-got / 10) - noise_ratio, 1e-12) / eps**2
        eps = float(np.sqrt((want - noise_ratio) / k))
    return eps
