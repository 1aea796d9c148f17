"""Spiking STFT denoiser with adversarial attack injection, SNR-threshold detection and AES-GCM sealing."""

__version__ = "0.1.0"
