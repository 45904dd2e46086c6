import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cgdrcn.synthcrowd import generate_corpus

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# single-threaded BLAS keeps every bitwise-determinism check meaningful
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """A 10-image 256x256 corpus on disk: (dir, records)."""
    out = tmp_path_factory.mktemp("corpus")
    recs = generate_corpus({"Low": 4, "Medium": 2, "High": 1, "Distractors": 2, "Weather": 1}, out, seed=3)
    return out, recs


SMOKE_LR = 1e-4
SMOKE_STEPS = 200


@pytest.fixture(scope="session")
def smoke_run(tmp_path_factory):
    """Tiny preset trained 200 steps on 10 Low/Medium 224x224 scenes (about 2 minutes).

    Returns (train config, samples, result, probe L_f before, probe L_f after).
    """
    from cgdrcn.model import init_model
    from cgdrcn.training import TrainConfig, load_corpus, probe_loss, train

    out = tmp_path_factory.mktemp("smoke")
    recs = generate_corpus({"Low": 5, "Medium": 5}, out, seed=0, size=(224, 224), test_fraction=0.0)
    samples = load_corpus(recs, out / "images")
    cfg = TrainConfig(steps=SMOKE_STEPS, lr=SMOKE_LR, batch_size=4, seed=0, checkpoint_every=50)
    before = probe_loss(init_model(cfg.model, cfg.seed), samples, cfg)
    result = train(samples, cfg)
    after = probe_loss(result.state, samples, cfg)
    return cfg, samples, result, before, after


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
