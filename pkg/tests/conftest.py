from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from hybridrec.gateway import CoarsePrediction, ImagePayload  # noqa: E402
from hybridrec.index import IndexBuilder  # noqa: E402
from hybridrec.types import Category  # noqa: E402

GOLDEN = Path(__file__).parent / "golden"


class MockGateway:
    """Scripted stand-in for the chat + image-embedding endpoints.

    ``coarse`` maps image bytes to (category, name); ``embeddings`` maps image
    bytes to a vector.  Call counters let tests assert which endpoints ran.
    """

    def __init__(self, coarse=None, embeddings=None, default=("other", "Thing"), embed_error=None):
        self.coarse = dict(coarse or {})
        self.embeddings = dict(embeddings or {})
        self.default = default
        self.embed_error = embed_error
        self.classify_calls = 0
        self.embed_calls = 0

    def classify_coarse(self, image: ImagePayload) -> CoarsePrediction:
        self.classify_calls += 1
        cat, name = self.coarse.get(image.data, self.default)
        raw = '{"category": "%s", "name": "%s"}' % (cat, name)
        return CoarsePrediction(Category.parse(cat), name, raw)

    def embed_image(self, image: ImagePayload):
        self.embed_calls += 1
        if self.embed_error is not None:
            raise self.embed_error
        return np.asarray(self.embeddings[image.data], dtype=np.float64)


@pytest.fixture
def mock_gateway_cls():
    return MockGateway


def random_samples(rng, n_classes, per_class, dim, prefix="c", spread=1.0):
    """Random (label, category, vector) build samples with well-separated class means."""
    out = []
    for k in range(n_classes):
        center = rng.normal(size=dim) * 3
        cat = "animal" if k % 2 == 0 else "plant"
        for _ in range(per_class):
            out.append((f"{prefix}{k:04d}", cat, center + rng.normal(size=dim) * spread))
    return out


def build(samples):
    b = IndexBuilder()
    for label, cat, vec in samples:
        b.add(label, cat, vec)
    return b.finalize()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# --- acceptance reporting ---------------------------------------------------

_criteria: dict[str, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(num, text): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    num, text = marker.args
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        prev = _criteria.get(num, ("PASS", text))[0]
        status = "PASS" if rep.outcome == "passed" and prev == "PASS" else "FAIL"
        _criteria[num] = (status, text)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_criteria, key=lambda n: int(n)):
        status, text = _criteria[num]
        terminalreporter.write_line(f"[{status}] criterion {num}: {text}")
