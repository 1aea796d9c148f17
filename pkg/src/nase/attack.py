"""FGSM and PGD perturbations of the noisy STFT magnitude under an L-inf budget."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dsp import MagnitudeGrid
from .errors import ConfigError, ShapeError
from .snn import SnnDenoiser, SpikingNet

BUDGET_SLACK = 1e-12
KINDS = ("none", "fgsm", "pgd")


@dataclass(frozen=True)
class AttackSpec:
    kind: str = "none"
    epsilon: float = 0.05
    alpha: float | None = None
    steps: int = 10
    seed: int = 0
    random_start: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown attack kind {self.kind!r}")
        if not self.epsilon >= 0:
            raise ConfigError("epsilon must be >= 0")
        if self.kind == "pgd":
            if self.step_size <= 0:
                raise ConfigError("PGD step size must be positive")
            if self.steps < 1:
                raise ConfigError("PGD needs at least one step")

    @property
    def step_size(self) -> float:
        return self.epsilon / 4 if self.alpha is None else self.alpha

    def with_epsilon(self, epsilon: float) -> "AttackSpec":
        return AttackSpec(self.kind, epsilon, self.alpha, self.steps, self.seed, self.random_start)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "epsilon": self.epsilon, "alpha": self.step_size,
                "steps": self.steps, "seed": self.seed, "random_start": self.random_start}


@dataclass(frozen=True, eq=False)
class Perturbation:
    delta: np.ndarray
    spec: AttackSpec

    def __post_init__(self):
        if np.max(np.abs(self.delta), initial=0.0) > self.spec.epsilon + BUDGET_SLACK:
            raise ConfigError("perturbation exceeds its L-inf budget")

    @property
    def linf(self) -> float:
        return float(np.max(np.abs(self.delta), initial=0.0))


def _values(grid) -> np.ndarray:
    return grid.mags if isinstance(grid, MagnitudeGrid) else np.asarray(grid, dtype=np.float64)


def _model(net):
    return SnnDenoiser(net) if isinstance(net, SpikingNet) else net


def _check(noisy: np.ndarray, clean: np.ndarray) -> None:
    if noisy.shape != clean.shape:
        raise ShapeError(f"noisy {noisy.shape} vs clean {clean.shape}")


def project_linf(x, x0, epsilon: float) -> np.ndarray:
    x, x0 = np.asarray(x, dtype=np.float64), np.asarray(x0, dtype=np.float64)
    if x.shape != x0.shape:
        raise ShapeError(f"{x.shape} vs {x0.shape}")
    return np.clip(x, x0 - epsilon, x0 + epsilon)


def fgsm(net, noisy_mag, clean_mag, spec: AttackSpec) -> Perturbation:
    """Single signed-gradient ascent step on the denoiser's MSE to the clean magnitude."""
    x0, clean = _values(noisy_mag), _values(clean_mag)
    _check(x0, clean)
    if spec.kind not in ("fgsm", "none"):
        raise ConfigError(f"fgsm called with kind {spec.kind!r}")
    if spec.epsilon == 0:
        return Perturbation(np.zeros_like(x0), spec)
    grad = _model(net).loss_gradient(x0, clean)
    adv = np.maximum(x0 + spec.epsilon * np.sign(grad), 0.0)
    return Perturbation(adv - x0, spec)


def pgd(net, noisy_mag, clean_mag, spec: AttackSpec, on_iterate=None) -> Perturbation:
    """Iterated signed-gradient ascent, projected onto the eps-ball and the nonnegative orthant.

    ``on_iterate(x)`` is called after every projection (used by tests).
    """
    x0, clean = _values(noisy_mag), _values(clean_mag)
    _check(x0, clean)
    if spec.kind != "pgd":
        raise ConfigError(f"pgd called with kind {spec.kind!r}")
    model = _model(net)
    eps, step = spec.epsilon, spec.step_size
    x = x0.copy()
    if spec.random_start and eps > 0:
        rng = np.random.default_rng([spec.seed, *x0.shape])
        x = np.maximum(x0 + rng.uniform(-eps, eps, size=x0.shape), 0.0)
    for _ in range(spec.steps):
        grad = model.loss_gradient(x, clean)
        x = np.maximum(project_linf(x + step * np.sign(grad), x0, eps), 0.0)
        if on_iterate is not None:
            on_iterate(x)
    return Perturbation(x - x0, spec)


def synthesize(net, noisy_mag, clean_mag, spec: AttackSpec) -> Perturbation:
    if spec.kind == "none":
        return Perturbation(np.zeros_like(_values(noisy_mag)), spec)
    if spec.kind == "fgsm":
        return fgsm(net, noisy_mag, clean_mag, spec)
    return pgd(net, noisy_mag, clean_mag, spec)


def apply(noisy_mag, pert: Perturbation):
    x0 = _values(noisy_mag)
    if x0.shape != pert.delta.shape:
        raise ShapeError(f"perturbation {pert.delta.shape} vs grid {x0.shape}")
    out = np.maximum(x0 + pert.delta, 0.0)
    return noisy_mag.with_values(out) if isinstance(noisy_mag, MagnitudeGrid) else out
