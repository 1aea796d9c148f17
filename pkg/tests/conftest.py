import numpy as np
import pytest

from nase.audio_io import SynthSpec, build_corpus
from nase.dsp import StftParams, split, stft
from nase.snn import TrainHyper, init_net, train


@pytest.fixture(scope="session")
def desk_corpus():
    return build_corpus(SynthSpec(num_clips=6, clip_seconds=1.0), 1234)


@pytest.fixture(scope="session")
def trained_net(desk_corpus):
    """Small trained denoiser shared across modules (a few seconds to build)."""
    net = init_net(StftParams().n_bins, 64, seed=0)
    return train(net, desk_corpus, StftParams(), TrainHyper(epochs=2, max_clips=4))


@pytest.fixture(scope="session")
def held_out_grids(desk_corpus):
    pair = desk_corpus.pairs[-1]
    noisy = split(stft(pair.noisy))[0]
    clean = split(stft(pair.clean))[0]
    return noisy, clean


class QuadStub:
    """L = sum over entries of (x - target)^2 / F, a differentiable denoiser stand-in."""

    def loss(self, x, target):
        return np.mean((np.asarray(x) - target) ** 2, axis=-1)

    def loss_gradient(self, x, target):
        return 2 * (np.asarray(x) - target) / np.shape(x)[-1]


class LinearStub:
    """L = c * x per entry."""

    def __init__(self, c=1.0):
        self.c = c

    def loss_gradient(self, x, target):
        return np.full(np.shape(x), self.c)


@pytest.fixture
def quad_stub():
    return QuadStub()


# --- acceptance reporting ---------------------------------------------------------

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None or call.when not in ("setup", "call"):
        return
    num, title = mark.args
    entry = _CRITERIA.setdefault(num, {"title": title, "ok": True, "ran": False, "notes": []})
    if call.excinfo is not None:
        entry["ok"] = False
        entry["notes"].append(call.excinfo.exconly().splitlines()[0][:160])
    if call.when == "call":
        entry["ran"] = True


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        e = _CRITERIA[num]
        status = "PASS" if e["ok"] and e["ran"] else "FAIL"
        line = f"[{status}] criterion {num}: {e['title']}"
        if status == "FAIL" and e["notes"]:
            line += f" -- {e['notes'][0]}"
        terminalreporter.write_line(line)
