"""Acceptance suite: one test per criterion, each at its stated tolerance.

Run alone with ``pytest tests/test_acceptance.py``; a PASS/FAIL line per
criterion is printed in the terminal summary.
"""

import itertools
import json
import time
from dataclasses import replace

import numpy as np
import pytest

from conftest import LinearStub
from nase.attack import AttackSpec, fgsm, pgd, synthesize
from nase.audio_io import AudioBuffer, SynthSpec, build_corpus
from nase.cli import main
from nase.defense import (
    ACK_RESET, FAULT, START, EncryptedBlob, GuardState, Phase, Verdict, aes_block_encrypt, aes_decrypt,
    aes_encrypt, step_guard, write_key,
)
from nase.dsp import StftParams, istft, mix, snr_db, split, stft, thd
from nase.errors import AuthError, StateError
from nase.pipeline import WALL_CLOCK_FIELDS, PipelineConfig, calibrate_epsilon, run_experiment
from nase.snn import LifParams, SnnDenoiser, TrainHyper, init_net, input_gradient, lif_step, mse, \
    relaxed_forward, train

criterion = pytest.mark.criterion


# --- 1 ------------------------------------------------------------------------------

@criterion(1, "detection rate >= 0.90 and FPR <= 0.10 at the calibrated 4.5-6.5 dB operating point")
def test_detection_rate_desk_scale():
    t0 = time.perf_counter()
    # the denoiser under attack is trained on a corpus disjoint from the evaluation one
    net = train(init_net(257, 128, seed=0), build_corpus(SynthSpec(num_clips=32), 1), StftParams(), TrainHyper())
    denoiser = SnnDenoiser(net)
    corpus = build_corpus(SynthSpec(), 0)
    assert len(corpus) == 200 and corpus.pairs[0].noisy.duration_s == 2.0
    cfg = PipelineConfig()
    eps = calibrate_epsilon(corpus.pairs, cfg, denoiser)
    cfg = replace(cfg, attack=cfg.attack.with_epsilon(eps))
    report = run_experiment(corpus, cfg, 0.5, denoiser=denoiser, key=bytes(range(32)),
                            attack_kinds=["fgsm", "pgd"])
    elapsed = time.perf_counter() - t0
    print(f"\neps={eps:.4g} detection={report.detection_rate} fpr={report.false_positive_rate} "
          f"snr_attacked={report.mean_snr_attacked_db:.3f} snr_clean={report.mean_snr_clean_db:.3f} "
          f"snr_out={report.mean_snr_out_db} spike_rate={report.mean_spike_rate} elapsed={elapsed:.0f}s")
    assert not report.faults
    assert 4.5 <= report.mean_snr_attacked_db <= 6.5
    assert report.detection_rate >= 0.90
    assert report.false_positive_rate <= 0.10
    assert elapsed < 300


# --- 2 ------------------------------------------------------------------------------

@criterion(2, "STFT reconstruction <= 1e-9 on 100 random 1 s buffers; split/mix within 1e-12")
def test_stft_fidelity():
    rng = np.random.default_rng(2024)
    worst_rt, worst_polar = 0.0, 0.0
    for _ in range(100):
        x = rng.uniform(-1, 1, 16000)
        spec = stft(AudioBuffer(x))
        worst_rt = max(worst_rt, np.max(np.abs(istft(spec).samples - x)))
        worst_polar = max(worst_polar, np.max(np.abs(mix(*split(spec)).frames - spec.frames)))
    assert worst_rt <= 1e-9
    assert worst_polar <= 1e-12


# --- 3 ------------------------------------------------------------------------------

@criterion(3, "attack budget over 1000 frames, PGD(1 step) == FGSM bitwise, linear stub hits x0+eps")
def test_attack_correctness(trained_net, held_out_grids):
    rng = np.random.default_rng(3)
    noisy, clean = held_out_grids
    idx = rng.integers(0, noisy.mags.shape[0], 1000)
    x = noisy.mags[idx] * rng.uniform(0.2, 2.0, (1000, 1))
    y = clean.mags[idx]
    for kind, eps in itertools.product(("fgsm", "pgd"), (0.05, 0.7, 5.0)):
        pert = synthesize(trained_net, x, y, AttackSpec(kind=kind, epsilon=eps, steps=4, seed=int(eps * 10)))
        assert np.max(np.abs(pert.delta)) <= eps + 1e-12
        assert np.all(x + pert.delta >= 0)

    for eps in (0.05, 1.0):
        a = fgsm(trained_net, x, y, AttackSpec(kind="fgsm", epsilon=eps)).delta
        b = pgd(trained_net, x, y, AttackSpec(kind="pgd", epsilon=eps, alpha=eps, steps=1,
                                                random_start=False)).delta
        assert np.array_equal(a, b)

    for eps, alpha in ((0.05, 0.0125), (0.2, 0.03), (1.0, 0.4)):
        x0 = np.full((2, 5), 1.5)
        seen = []
        pgd(LinearStub(2.0), x0, x0, AttackSpec(kind="pgd", epsilon=eps, alpha=alpha, steps=40,
                                                 random_start=False), on_iterate=lambda z: seen.append(z.copy()))
        k = int(np.ceil(eps / alpha - 1e-9))
        assert np.max(np.abs(seen[k - 1] - (x0 + eps))) <= 1e-12


# --- 4 ------------------------------------------------------------------------------

def _central_diff(net, x, target, h=1e-4):
    g = np.zeros_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        g[k] = (mse(relaxed_forward(net, x + e), target) - mse(relaxed_forward(net, x - e), target)) / (2 * h)
    return g


@criterion(4, "surrogate input gradient vs finite differences: sign >= 99%, relative L2 <= 5%")
def test_gradient_validity():
    signs, errs = [], []
    shapes = [(8, [16]), (16, [32]), (12, [20, 20]), (16, [24, 8])]
    for seed, (n_in, hidden) in enumerate(shapes):
        for lif in (LifParams(), LifParams(reset="zero", t_steps=12)):
            net = init_net(n_in, hidden, lif=lif, seed=seed)
            assert net.n_neurons <= 64
            net.weights = [2.0 * w for w in net.weights]
            rng = np.random.default_rng(seed)
            x, target = rng.uniform(0, 3, n_in), rng.uniform(0, 1, n_in)
            g, fd = input_gradient(net, x, target), _central_diff(net, x, target)
            signs.append(np.sign(g) == np.sign(fd))
            errs.append(np.linalg.norm(g - fd) / np.linalg.norm(fd))
    agreement = np.mean(np.concatenate(signs))
    print(f"\nsign agreement {agreement:.4f}, worst relative L2 {max(errs):.2e}")
    assert agreement >= 0.99
    assert max(errs) <= 0.05


# --- 5 ------------------------------------------------------------------------------

def _step_oracle_first_spike(beta, theta, i, n=100):
    v = 0.0
    for t in range(1, n + 1):
        u = beta * v + i
        if u >= theta:
            return t
        v = u
    return None


@criterion(5, "LIF fixed point within 1e-9; first spike for (0.9, 1, 0.2) at step 8")
def test_lif_analytics():
    p = LifParams(beta=0.9, threshold=1.0)
    v = 0.0
    for _ in range(1000):
        v, s = lif_step(v, 0.05, p)
        assert s == 0
    assert abs(v - 0.05 / (1 - 0.9)) <= 1e-9

    first = None
    v = 0.0
    for t in range(1, 101):
        v, s = lif_step(v, 0.2, p)
        if s:
            first = t
            break
    oracle = _step_oracle_first_spike(0.9, 1.0, 0.2)
    assert first == oracle
    assert first == 8, f"first spike at step {first} (step oracle: {oracle})"


# --- 6 ------------------------------------------------------------------------------

@criterion(6, "AES-128 FIPS-197 C.1 vector, roundtrip to 1 MiB, 200 random bit flips rejected")
def test_aes():
    key = bytes.fromhex("000102030405060708090a0b0c0d0e0f")
    assert aes_block_encrypt(key, bytes.fromhex("00112233445566778899aabbccddeeff")).hex() == \
        "69c4e0d86a7b0430d8cdb78070b4c55a"
    rng = np.random.default_rng(6)
    k32 = rng.integers(0, 256, 32, dtype=np.uint8).tobytes()
    for n in (0, 1, 31, 1000, 65537, 1 << 20):
        pt = rng.integers(0, 256, n, dtype=np.uint8).tobytes()
        nonce = rng.integers(0, 256, 12, dtype=np.uint8).tobytes()
        for k in (k32, k32[:16]):
            assert aes_decrypt(k, EncryptedBlob.from_bytes(aes_encrypt(k, nonce, pt).to_bytes())) == pt

    blob = aes_encrypt(k32, bytes(12), rng.integers(0, 256, 64, dtype=np.uint8).tobytes())
    raw = blob.to_bytes()
    # bits of nonce, ciphertext and tag (everything after the 5-byte header)
    positions = rng.choice(np.arange(5 * 8, len(raw) * 8), size=200, replace=False)
    for bit in positions:
        bad = bytearray(raw)
        bad[bit // 8] ^= 1 << (bit % 8)
        with pytest.raises(AuthError):
            aes_decrypt(k32, EncryptedBlob.from_bytes(bytes(bad)))


# --- 7 ------------------------------------------------------------------------------

@criterion(7, "guard transition table exhaustive; flags only in HARD_RESET; illegal pairs raise")
def test_guard_state_machine():
    verdicts = [Verdict(False, 20.0)] + [Verdict(True, 2.0, c) for c in ("fgsm_like", "pgd_like", "unknown")]
    events = [START, ACK_RESET, FAULT, "garbage", None, *verdicts]
    states = [GuardState(Phase.IDLE), GuardState(Phase.RUNNING)] + [
        GuardState(Phase.HARD_RESET, f, p) for f in (False, True) for p in (False, True)]
    legal = 0
    for g, e in itertools.product(states, events):
        if g.state is Phase.IDLE and e == START:
            want = GuardState(Phase.RUNNING)
        elif g.state is Phase.RUNNING and isinstance(e, Verdict):
            want = g if not e.attacked else GuardState(
                Phase.HARD_RESET, e.classified == "fgsm_like", e.classified == "pgd_like")
        elif g.state is Phase.HARD_RESET and e == ACK_RESET:
            want = GuardState(Phase.IDLE)
        elif e == FAULT:
            want = g if g.state is Phase.HARD_RESET else GuardState(Phase.HARD_RESET)
        else:
            with pytest.raises(StateError):
                step_guard(g, e)
            continue
        got = step_guard(g, e)
        assert got == want
        assert got.state in set(Phase)
        assert not (got.flag_fgsm or got.flag_pgd) or got.state is Phase.HARD_RESET
        legal += 1
    assert legal == 1 + 4 + 4 + 6
    for s in (Phase.IDLE, Phase.RUNNING):
        for f, p in ((True, False), (False, True), (True, True)):
            with pytest.raises(StateError):
                GuardState(s, f, p)


# --- 8 ------------------------------------------------------------------------------

@criterion(8, "THD of a 0.395 single harmonic is 0.395 +- 1e-3; SNR identities within 1e-9")
def test_metrics():
    fs = 16000
    t = np.arange(2 * fs) / fs
    for f0 in (250.0, 440.0, 1000.0):
        x = 0.5 * np.sin(2 * np.pi * f0 * t) + 0.5 * 0.395 * np.sin(2 * np.pi * 2 * f0 * t + 0.3)
        assert abs(thd(AudioBuffer(x, fs), f0) - 0.395) <= 1e-3
    rng = np.random.default_rng(8)
    s = rng.standard_normal(32000)
    n = rng.standard_normal(32000)
    n *= np.sqrt(np.sum(s**2) / np.sum(n**2))
    assert abs(snr_db(s, s + n)) <= 1e-9
    assert abs(snr_db(s, s + n * np.sqrt(0.1)) - 10.0) <= 1e-9


# --- 9 ------------------------------------------------------------------------------

def _strip(obj):
    if isinstance(obj, dict):
        return {k: _strip(v) for k, v in obj.items() if k not in WALL_CLOCK_FIELDS}
    if isinstance(obj, list):
        return [_strip(v) for v in obj]
    return obj


@criterion(9, "two identical cmd_run invocations give byte-identical reports minus wall-clock fields")
def test_run_determinism(tmp_path, monkeypatch):
    monkeypatch.setenv("NASE_KEY_FILE", str(write_key(tmp_path / "k")))
    corpus = tmp_path / "corpus"
    assert main(["gen", str(corpus), "--num-clips", "6", "--clip-seconds", "1.0", "--seed", "9"]) == 0
    ckpt = tmp_path / "net.snn"
    assert main(["train", "--corpus", str(corpus), "--out", str(ckpt), "--epochs", "1",
                 "--set", "snn.hidden=32", "--set", "train.max_clips=3"]) == 0
    blobs = []
    for name in ("a", "b"):
        path = tmp_path / f"{name}.json"
        code = main(["run", "--corpus", str(corpus), "--checkpoint", str(ckpt), "--attack", "pooled",
                     "--epsilon", "auto", "--report", str(path), "--no-plots"])
        assert code == 0
        blobs.append(json.dumps(_strip(json.loads(path.read_text())), sort_keys=True).encode())
    assert blobs[0] == blobs[1]
    assert (tmp_path / "a.csv").read_text().count("\n") == 7
