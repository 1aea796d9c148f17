"""Parametric LIF spiking denoiser over STFT magnitude frames.

Every layer, the input layer included, is a population of discrete-time
leaky integrate-and-fire neurons::

    u[t] = beta * v[t-1] + I[t]
    s[t] = H(u[t] - threshold)
    v[t] = u[t] - threshold * s[t]        (reset="subtract")
    v[t] = u[t] * (1 - s[t])              (reset="zero")

The input layer is driven by the constant current ``input_scale * mag``
(deterministic rate code); layer ``l`` receives ``s[l-1] @ W[l]``. The
denoised magnitude is ``output_scale * count / t_steps`` of the last layer.

Gradients come in two flavours. Training uses the usual surrogate scheme:
hard spikes forward, fast-sigmoid derivative backward, reset detached.
Attack-facing input gradients use the *relaxed* network, where the
Heaviside is replaced by the fast sigmoid itself, so the returned
gradient is the exact derivative of a well-defined function and can be
checked against finite differences.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DomainError, FormatError, IoError, ShapeError, TrainingError


@dataclass(frozen=True)
class LifParams:
    beta: float = 0.9
    threshold: float = 1.0
    reset: str = "subtract"
    t_steps: int = 25
    surrogate_slope: float = 5.0

    def __post_init__(self):
        if not 0 < self.beta < 1:
            raise ConfigError(f"beta must be in (0, 1), got {self.beta}")
        if self.threshold <= 0:
            raise ConfigError("threshold must be positive")
        if self.reset not in ("subtract", "zero"):
            raise ConfigError(f"unknown reset mode {self.reset!r}")
        if self.t_steps < 1:
            raise ConfigError("t_steps must be >= 1")
        if self.surrogate_slope <= 0:
            raise ConfigError("surrogate_slope must be positive")


@dataclass
class SpikingNet:
    layer_sizes: list[int]
    weights: list[np.ndarray]
    lif: LifParams = field(default_factory=LifParams)
    input_scale: float = 0.5
    output_scale: float = 1.0
    frame_duration_s: float = 128 / 16000
    seed: int = 0
    final_loss: float | None = None
    initial_loss: float | None = field(default=None, compare=False)

    def __post_init__(self):
        if len(self.layer_sizes) < 2:
            raise ConfigError("need at least an input and an output layer")
        if len(self.weights) != len(self.layer_sizes) - 1:
            raise ShapeError("one weight matrix per connection required")
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        for k, w in enumerate(self.weights):
            if w.shape != (self.layer_sizes[k], self.layer_sizes[k + 1]):
                raise ShapeError(f"weight {k} has shape {w.shape}, expected "
                                 f"{(self.layer_sizes[k], self.layer_sizes[k + 1])}")
            if not np.all(np.isfinite(w)):
                raise ConfigError(f"weight {k} is not finite")

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_neurons(self) -> int:
        return int(sum(self.layer_sizes))

    def copy(self) -> "SpikingNet":
        return replace(self, layer_sizes=list(self.layer_sizes), weights=[w.copy() for w in self.weights])


@dataclass(frozen=True)
class SpikeTrain:
    spikes: np.ndarray
    duration_s: float

    def __post_init__(self):
        if self.duration_s <= 0:
            raise ConfigError("duration must be positive")

    @property
    def counts(self) -> np.ndarray:
        return self.spikes.sum(axis=0)


@dataclass(frozen=True)
class SpikeTrace:
    total_spikes: int
    duration_s: float
    per_layer_counts: tuple[int, ...]

    @staticmethod
    def merge(traces) -> "SpikeTrace":
        traces = list(traces)
        per_layer = tuple(int(sum(c)) for c in zip(*(t.per_layer_counts for t in traces)))
        return SpikeTrace(sum(per_layer), float(sum(t.duration_s for t in traces)), per_layer)


def init_net(n_bins: int, hidden: int | list[int] = 128, *, lif: LifParams | None = None,
             seed: int = 0, ref_magnitude: float = 1.0, frame_duration_s: float = 128 / 16000) -> SpikingNet:
    """Randomly initialised ``[n_bins, *hidden, n_bins]`` network.

    ``ref_magnitude`` is the magnitude that should drive ``0.5 * threshold``
    per step; the output scale maps a full spike rate back to two of those.
    """
    lif = lif or LifParams()
    hidden = [hidden] if isinstance(hidden, int) else list(hidden)
    sizes = [n_bins, *hidden, n_bins]
    rng = np.random.default_rng(seed)
    weights = [rng.normal(0.0, 1.0 / np.sqrt(a), size=(a, b)) * lif.threshold
               for a, b in zip(sizes[:-1], sizes[1:])]
    return SpikingNet(sizes, weights, lif, 0.5 * lif.threshold / ref_magnitude, 2.0 * ref_magnitude,
                      frame_duration_s, seed)


def lif_step(v, i, p: LifParams):
    """One LIF update; returns ``(v_next, spike)`` elementwise."""
    v = np.asarray(v, dtype=np.float64)
    u = p.beta * v + np.asarray(i, dtype=np.float64)
    spike = (u >= p.threshold).astype(np.float64)
    if p.reset == "subtract":
        v_next = u - p.threshold * spike
    else:
        v_next = u * (1.0 - spike)
    if v_next.ndim == 0:
        return float(v_next), int(spike)
    return v_next, spike.astype(np.int8)


def _relaxed_spike(u, p: LifParams):
    z = p.surrogate_slope * (u - p.threshold)
    return 0.5 * (1.0 + z / (1.0 + np.abs(z)))


def surrogate_derivative(u, p: LifParams):
    """Fast-sigmoid derivative, normalised so it integrates to one."""
    z = p.surrogate_slope * (u - p.threshold)
    return 0.5 * p.surrogate_slope / (1.0 + np.abs(z)) ** 2


def _check_frames(net: SpikingNet, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.ndim != 2 or x2.shape[1] != net.n_inputs:
        raise ShapeError(f"frame width {x2.shape[-1]} != input layer {net.n_inputs}")
    return x2


def _simulate(net: SpikingNet, x: np.ndarray, relaxed: bool, record: bool):
    """Run the network on a batch ``x`` (B x F). Returns final-layer counts and the tape."""
    p = net.lif
    batch = x.shape[0]
    drive = net.input_scale * x
    v = [np.zeros((batch, n)) for n in net.layer_sizes]
    counts = [np.zeros((batch, n)) for n in net.layer_sizes]
    tape_u = [[] for _ in net.layer_sizes]
    tape_s = [[] for _ in net.layer_sizes]
    for _ in range(p.t_steps):
        current = drive
        for k in range(len(net.layer_sizes)):
            if k > 0:
                current = s @ net.weights[k - 1]
            u = p.beta * v[k] + current
            s = _relaxed_spike(u, p) if relaxed else (u >= p.threshold).astype(np.float64)
            v[k] = u - p.threshold * s if p.reset == "subtract" else u * (1.0 - s)
            counts[k] += s
            if record:
                tape_u[k].append(u)
                tape_s[k].append(s)
    return counts, (tape_u, tape_s)


def _backward(net: SpikingNet, tape, grad_out: np.ndarray, relaxed: bool):
    """Backprop through time. ``grad_out`` is dL/d(output magnitude), B x F_out.

    Returns (dL/dx, [dL/dW_k]).
    """
    p = net.lif
    tape_u, tape_s = tape
    n_layers = len(net.layer_sizes)
    g_out_spike = grad_out * net.output_scale / p.t_steps
    gv_next = [np.zeros_like(tape_u[k][0]) for k in range(n_layers)]
    gw = [np.zeros_like(w) for w in net.weights]
    gx = np.zeros_like(tape_u[0][0])
    for t in reversed(range(p.t_steps)):
        gu_above = None
        for k in reversed(range(n_layers)):
            u, s = tape_u[k][t], tape_s[k][t]
            gv = p.beta * gv_next[k]
            gs = g_out_spike.copy() if k == n_layers - 1 else gu_above @ net.weights[k].T
            if p.reset == "subtract":
                gu = gv.copy()
                if relaxed:
                    gs -= p.threshold * gv
            else:
                gu = gv * (1.0 - s)
                if relaxed:
                    gs -= u * gv
            gu += gs * surrogate_derivative(u, p)
            if k > 0:
                gw[k - 1] += tape_s[k - 1][t].T @ gu
            else:
                gx += gu
            gv_next[k] = gu
            gu_above = gu
    return gx * net.input_scale, gw


def encode_rate(mag_frame, net: SpikingNet) -> SpikeTrain:
    """Spike raster of the input layer under constant drive."""
    x = np.asarray(mag_frame, dtype=np.float64)
    if np.any(x < 0):
        raise DomainError("magnitudes must be nonnegative")
    x2 = _check_frames(net, x)[0]
    p = net.lif
    v = np.zeros_like(x2)
    raster = np.zeros((p.t_steps, x2.size), dtype=np.int8)
    for t in range(p.t_steps):
        v, raster[t] = lif_step(v, net.input_scale * x2, p)
    return SpikeTrain(raster, net.frame_duration_s)


def forward(net: SpikingNet, mag_frame):
    """Hard-spike inference on one frame (F,) or a batch of frames (T x F)."""
    x = _check_frames(net, mag_frame)
    counts, _ = _simulate(net, x, relaxed=False, record=False)
    out = net.output_scale * counts[-1] / net.lif.t_steps
    per_layer = tuple(int(c.sum()) for c in counts)
    trace = SpikeTrace(sum(per_layer), net.frame_duration_s * x.shape[0], per_layer)
    return (out[0] if np.ndim(mag_frame) == 1 else out), trace


def relaxed_forward(net: SpikingNet, mag_frame) -> np.ndarray:
    """Output of the surrogate-relaxed network (smooth in the input)."""
    x = _check_frames(net, mag_frame)
    counts, _ = _simulate(net, x, relaxed=True, record=False)
    out = net.output_scale * counts[-1] / net.lif.t_steps
    return out[0] if np.ndim(mag_frame) == 1 else out


def mse(a, b) -> float:
    return float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))


def input_gradient(net: SpikingNet, mag_frame, target_frame) -> np.ndarray:
    """d/dx of per-frame MSE(relaxed_forward(x), target).

    Accepts one frame or a T x F batch; for a batch each row gets the
    gradient of its own frame's MSE.
    """
    x = _check_frames(net, mag_frame)
    target = np.asarray(target_frame, dtype=np.float64).reshape(x.shape)
    counts, tape = _simulate(net, x, relaxed=True, record=True)
    out = net.output_scale * counts[-1] / net.lif.t_steps
    grad_out = 2.0 * (out - target) / x.shape[1]
    gx, _ = _backward(net, tape, grad_out, relaxed=True)
    return gx[0] if np.ndim(mag_frame) == 1 else gx


def spike_rate(trace: SpikeTrace) -> float:
    if trace.duration_s <= 0:
        raise ConfigError("trace duration must be positive")
    return trace.total_spikes / trace.duration_s


def spectral_subtract(mag, noise_floor, alpha: float = 1.0):
    """``max(mag - alpha * noise_floor, 0)`` per bin; accepts grids or arrays."""
    if alpha < 0:
        raise ConfigError("alpha must be >= 0")
    values = mag.mags if hasattr(mag, "mags") else np.asarray(mag, dtype=np.float64)
    floor = np.asarray(noise_floor, dtype=np.float64)
    if floor.shape[-1] != values.shape[-1]:
        raise ShapeError("noise floor width does not match magnitude grid")
    out = np.maximum(values - alpha * floor, 0.0)
    return mag.with_values(out) if hasattr(mag, "with_values") else out


# --- training -------------------------------------------------------------

@dataclass(frozen=True)
class TrainHyper:
    lr: float = 0.003
    epochs: int = 2
    batch: int = 32
    seed: int = 0
    max_clips: int | None = 32


def training_frames(corpus, stft_params, max_clips: int | None = None):
    from .dsp import split, stft

    pairs = corpus.pairs if max_clips is None else corpus.pairs[:max_clips]
    xs, ys = [], []
    for pair in pairs:
        xs.append(split(stft(pair.noisy, stft_params))[0].mags)
        ys.append(split(stft(pair.clean, stft_params))[0].mags)
    return np.concatenate(xs), np.concatenate(ys)


def calibrate_scales(net: SpikingNet, noisy_mags: np.ndarray) -> SpikingNet:
    ref = float(np.percentile(noisy_mags, 99.9))
    if not ref > 0:
        raise TrainingError("training magnitudes are all zero")
    out = net.copy()
    out.input_scale = 0.5 * net.lif.threshold / ref
    out.output_scale = 2.0 * ref
    return out


def train(net: SpikingNet, corpus, stft_params, hyper: TrainHyper = TrainHyper(), log=None) -> SpikingNet:
    """Surrogate-gradient training (Adam updates) on frame MSE, noisy -> clean.

    The weights of the best epoch are returned, so the final loss never
    exceeds the loss at initialisation.

    The reported loss is MSE in units of ``output_scale``. With
    ``epochs == 0`` the weights and scales are returned untouched and only
    the loss is measured.
    """
    if not corpus.pairs:
        raise ConfigError("empty corpus")
    x_all, y_all = training_frames(corpus, stft_params, hyper.max_clips)
    if x_all.shape[1] != net.n_inputs:
        raise ShapeError(f"STFT gives {x_all.shape[1]} bins, net expects {net.n_inputs}")
    if hyper.epochs == 0:
        out = net.copy()
        out.initial_loss = out.final_loss = mse(forward(out, x_all)[0], y_all) / out.output_scale**2
        return out
    net = calibrate_scales(net, x_all)
    scale2 = net.output_scale**2
    rng = np.random.default_rng(hyper.seed)
    m1 = [np.zeros_like(w) for w in net.weights]
    m2 = [np.zeros_like(w) for w in net.weights]
    b1, b2, n_step = 0.9, 0.999, 0

    def full_loss():
        out, _ = forward(net, x_all)
        return mse(out, y_all) / scale2

    initial = full_loss()
    best, best_weights = initial, [w.copy() for w in net.weights]
    if log:
        log(f"initial loss {initial:.6g}")
    for epoch in range(hyper.epochs):
        order = rng.permutation(x_all.shape[0])
        for start in range(0, order.size, hyper.batch):
            idx = order[start:start + hyper.batch]
            xb, yb = x_all[idx], y_all[idx]
            counts, tape = _simulate(net, xb, relaxed=False, record=True)
            out = net.output_scale * counts[-1] / net.lif.t_steps
            grad_out = 2.0 * (out - yb) / (yb.size * scale2)
            _, gw = _backward(net, tape, grad_out, relaxed=False)
            n_step += 1
            for k, g in enumerate(gw):
                if not np.all(np.isfinite(g)):
                    raise TrainingError(f"non-finite gradient in epoch {epoch}")
                m1[k] = b1 * m1[k] + (1 - b1) * g
                m2[k] = b2 * m2[k] + (1 - b2) * g * g
                step = (m1[k] / (1 - b1**n_step)) / (np.sqrt(m2[k] / (1 - b2**n_step)) + 1e-12)
                net.weights[k] -= hyper.lr * step
        loss = full_loss()
        if not np.isfinite(loss):
            raise TrainingError(f"loss diverged in epoch {epoch}")
        if log:
            log(f"epoch {epoch + 1}/{hyper.epochs} loss {loss:.6g}")
        if loss <= best:
            best, best_weights = loss, [w.copy() for w in net.weights]
    # keep the best epoch (or the start) rather than the last one
    net.weights = best_weights
    net.final_loss = best
    net.initial_loss = initial
    return net


# --- checkpoint -----------------------------------------------------------
# "SNN1" | u32 header length | JSON header | little-endian float64 weights

def save_checkpoint(net: SpikingNet, path) -> None:
    header = {
        "layer_sizes": list(net.layer_sizes),
        "lif": {
            "beta": net.lif.beta,
            "threshold": net.lif.threshold,
            "reset": net.lif.reset,
            "t_steps": net.lif.t_steps,
            "surrogate_slope": net.lif.surrogate_slope,
        },
        "input_scale": net.input_scale,
        "output_scale": net.output_scale,
        "frame_duration_s": net.frame_duration_s,
        "seed": net.seed,
        "final_loss": net.final_loss,
    }
    head = json.dumps(header, sort_keys=True).encode()
    blob = b"".join(np.asarray(w, dtype="<f8").tobytes() for w in net.weights)
    try:
        Path(path).write_bytes(b"SNN1" + struct.pack("<I", len(head)) + head + blob)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_checkpoint(path) -> SpikingNet:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:4] != b"SNN1":
        raise FormatError(f"{path}: not an SNN1 checkpoint")
    (n,) = struct.unpack_from("<I", raw, 4)
    header = json.loads(raw[8:8 + n])
    sizes = header["layer_sizes"]
    flat = np.frombuffer(raw, dtype="<f8", offset=8 + n)
    expected = sum(a * b for a, b in zip(sizes[:-1], sizes[1:]))
    if flat.size != expected:
        raise FormatError(f"{path}: {flat.size} weights, expected {expected}")
    weights, pos = [], 0
    for a, b in zip(sizes[:-1], sizes[1:]):
        weights.append(flat[pos:pos + a * b].reshape(a, b).copy())
        pos += a * b
    return SpikingNet(sizes, weights, LifParams(**header["lif"]), header["input_scale"],
                      header["output_scale"], header["frame_duration_s"], header["seed"],
                      header["final_loss"])


# --- denoiser adaptors used by the pipeline and attacks -----------------------

class SnnDenoiser:
    """Frame-batched wrapper exposing ``denoise`` and ``loss_gradient``."""

    kind = "snn"

    def __init__(self, net: SpikingNet):
        self.net = net

    def denoise(self, mags: np.ndarray):
        out, trace = forward(self.net, mags)
        return out, trace

    def loss(self, mags: np.ndarray, target: np.ndarray) -> np.ndarray:
        out = relaxed_forward(self.net, mags)
        return np.mean((out - target) ** 2, axis=1)

    def loss_gradient(self, mags: np.ndarray, target: np.ndarray) -> np.ndarray:
        return input_gradient(self.net, mags, target)


def estimate_noise_floor(mags: np.ndarray, width: int = 31) -> np.ndarray:
    """Per-bin floor: median filter across frequency of the time-averaged spectrum.

    Stationary tones defeat per-bin temporal minima, so the floor is taken
    across neighbouring bins instead.
    """
    from scipy.ndimage import median_filter

    return median_filter(mags.mean(axis=0), size=width, mode="nearest")


class SpectralSubtractDenoiser:
    """Gradient-capable spectral subtraction with a per-clip noise floor."""

    kind = "spectral_subtract"

    def __init__(self, alpha: float = 1.5):
        self.alpha = alpha

    def denoise(self, mags: np.ndarray):
        return spectral_subtract(mags, estimate_noise_floor(mags), self.alpha), None

    def loss(self, mags: np.ndarray, target: np.ndarray) -> np.ndarray:
        out = spectral_subtract(mags, estimate_noise_floor(mags), self.alpha)
        return np.mean((out - target) ** 2, axis=1)

    def loss_gradient(self, mags: np.ndarray, target: np.ndarray) -> np.ndarray:
        # floor treated as a constant of the clip
        floor = estimate_noise_floor(mags)
        out = np.maximum(mags - self.alpha * floor, 0.0)
        return 2.0 * (out - target) * (mags - self.alpha * floor > 0) / mags.shape[1]
