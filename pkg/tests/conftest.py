import numpy as np
import pytest

from patool import corpus, ctc
from patool.audio import Waveform


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tone_clip():
    """One second of a two-tone signal with a quiet gap in the middle."""
    t = np.arange(16000) / 16000
    x = 0.3 * np.sin(2 * np.pi * 440 * t) + 0.1 * np.sin(2 * np.pi * 3100 * t)
    x[6000:9000] *= 0.01
    x += np.random.default_rng(0).normal(0, 1e-4, x.size)
    return Waveform(x, 16000)


@pytest.fixture(scope="session")
def small_model():
    """Untrained but feature-normalized micro model (for gradient checks)."""
    data = corpus.toy_corpus(4, seed=3)
    return ctc.fit_feature_stats(ctc.init_model(seed=5, hidden=16), [w for w, _ in data])


@pytest.fixture(scope="session")
def trained_model(tmp_path_factory):
    """Micro model trained on the built-in curriculum corpus (about 40 s on one core)."""
    return corpus.build_toy_model(seed=0).model
