import numpy as np
import pytest

from emoconv import datasets as ds
from emoconv.dsp import MelConfig, Waveform


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory):
    """Default toy corpus (2 speakers x 5 emotions x 6/2/2 files)."""
    root = tmp_path_factory.mktemp("toy_corpus")
    return ds.synth_toy_corpus(root, seed=0)


@pytest.fixture(scope="session")
def toy_index(toy_root):
    return ds.index_corpus(toy_root)


@pytest.fixture(scope="session")
def mel_cfg():
    return MelConfig()


def sine_wave(freq_hz: float, seconds: float = 1.0, amp: float = 0.5, sr: int = 16000) -> Waveform:
    t = np.arange(int(seconds * sr)) / sr
    return Waveform(samples=amp * np.sin(2 * np.pi * freq_hz * t), sample_rate_hz=sr)
