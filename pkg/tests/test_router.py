import numpy as np
import pytest

from hybridrec.errors import TransportError, RouterError, ResponseParseError
from hybridrec.gateway import ImagePayload
from hybridrec.index import IndexBuilder, Match
from hybridrec.router import (
    Decision,
    Router,
    RouterConfig,
    check_consistency,
    decide,
    recognize,
)
from hybridrec.types import Category, Granularity

from conftest import MockGateway
from oracles import ROUTING_TABLE


def breed_index():
    """Three dog breeds plus a plant; Labrador points along +x from the global mean."""
    b = IndexBuilder()
    b.add("Labrador Retriever", "animal", [1.0, 0.0, 0.0])
    b.add("Beagle", "animal", [0.0, 1.0, 0.0])
    b.add("Poodle", "animal", [-1.0, 0.0, 0.0])
    b.add("Rose", "plant", [0.0, -1.0, 0.0])
    return b.finalize()


def query_with_similarity(index, label, sim):
    """An embedding whose cosine to ``label``'s processed centroid is exactly ``sim``."""
    c = index.processed_vector(label)
    ortho = np.array([0.0, 0.0, 1.0])
    return index.global_mean + sim * c + np.sqrt(1 - sim ** 2) * ortho


DOG = ImagePayload(b"dog.jpg")
BAG = ImagePayload(b"bag.jpg")


def test_other_goes_direct_without_embedding():
    gw = MockGateway({BAG.data: ("other", "Backpack")})
    r = recognize(RouterConfig(0.5), breed_index(), gw, BAG)
    assert (r.label, r.granularity, r.trace.decision) == ("Backpack", Granularity.COARSE, Decision.DIRECT_COARSE)
    assert r.similarity is None
    assert gw.embed_calls == 0


def test_fine_label_adopted_above_threshold():
    idx = breed_index()
    gw = MockGateway({DOG.data: ("animal", "Dog")}, {DOG.data: query_with_similarity(idx, "Labrador Retriever", 0.91)})
    r = recognize(RouterConfig(0.5), idx, gw, DOG)
    assert r.label == "Labrador Retriever"
    assert r.granularity is Granularity.FINE
    assert r.similarity == pytest.approx(0.91, abs=1e-9)
    assert r.trace.decision is Decision.FINE_ADOPTED


def test_coarse_fallback_below_threshold():
    idx = breed_index()
    gw = MockGateway({DOG.data: ("animal", "Dog")}, {DOG.data: query_with_similarity(idx, "Labrador Retriever", 0.30)})
    r = recognize(RouterConfig(0.5), idx, gw, DOG)
    assert (r.label, r.granularity, r.trace.decision) == ("Dog", Granularity.COARSE, Decision.FALLBACK_BELOW_THRESHOLD)
    assert r.similarity == pytest.approx(0.30, abs=1e-9)
    assert r.trace.retrieval.label == "Labrador Retriever"


def test_degenerate_query_falls_back():
    idx = breed_index()
    gw = MockGateway({DOG.data: ("animal", "Dog")}, {DOG.data: idx.global_mean})
    r = recognize(RouterConfig(-1.0), idx, gw, DOG)
    assert r.trace.decision is Decision.FALLBACK_DEGENERATE
    assert r.label == "Dog" and r.similarity is None
    check_consistency(r, -1.0)


def test_coarse_name_is_not_rewritten():
    gw = MockGateway({BAG.data: ("other", "  lego BRICK")})
    r = recognize(RouterConfig(0.5), breed_index(), gw, BAG)
    assert r.label == "  lego BRICK"


def test_coarse_failure_has_stage():
    class Failing(MockGateway):
        def classify_coarse(self, image):
            raise ResponseParseError("bad")

    with pytest.raises(RouterError) as ei:
        recognize(RouterConfig(0.5), breed_index(), Failing(), DOG)
    assert ei.value.stage == "coarse"


def test_retrieval_failure_degrades_by_default():
    gw = MockGateway({DOG.data: ("animal", "Dog")}, embed_error=TransportError("down"))
    r = recognize(RouterConfig(0.5), breed_index(), gw, DOG)
    assert r.label == "Dog" and r.trace.degraded
    assert r.trace.decision is Decision.FALLBACK_DEGENERATE
    assert "embed" in r.trace.error


def test_retrieval_failure_raises_when_degrade_disabled():
    gw = MockGateway({DOG.data: ("animal", "Dog")}, embed_error=TransportError("down"))
    with pytest.raises(RouterError) as ei:
        recognize(RouterConfig(0.5, degrade_on_retrieval_error=False), breed_index(), gw, DOG)
    assert ei.value.stage == "embed"


def test_search_dimension_error_is_search_stage():
    gw = MockGateway({DOG.data: ("animal", "Dog")}, {DOG.data: [1.0, 2.0]})
    with pytest.raises(RouterError) as ei:
        recognize(RouterConfig(0.5, degrade_on_retrieval_error=False), breed_index(), gw, DOG)
    assert ei.value.stage == "search"


def test_specialized_subset():
    idx = breed_index()
    gw = MockGateway({DOG.data: ("animal", "Dog")}, {DOG.data: query_with_similarity(idx, "Beagle", 0.99)})
    r = recognize(RouterConfig(0.5, specialized_categories=frozenset({"plant"})), idx, gw, DOG)
    assert r.trace.decision is Decision.DIRECT_COARSE and gw.embed_calls == 0


@pytest.mark.parametrize("kw", [dict(threshold=1.5), dict(threshold=-2), dict(threshold=float("nan")),
                                dict(threshold=0.5, specialized_categories=frozenset({"other"}))])
def test_router_config_validation(kw):
    with pytest.raises(ValueError):
        RouterConfig(**kw)


# --- decide kernel ------------------------------------------------------------

def _match(kind, tau):
    return {
        "none": None,
        "below": Match("x", Category.ANIMAL, tau - 0.01),
        "above": Match("x", Category.ANIMAL, tau + 0.01),
        "degenerate": Match.no_match(),
    }[kind]


@pytest.mark.parametrize("cat,kind", list(ROUTING_TABLE))
def test_decide_truth_table(cat, kind):
    tau = 0.4
    categories = [Category.OTHER] if cat == "other" else [Category.ANIMAL, Category.PLANT]
    for c in categories:
        assert decide(c, _match(kind, tau), tau).value == ROUTING_TABLE[(cat, kind)]


@pytest.mark.parametrize("tau", [-1.0, 0.0, 0.37, 1.0])
def test_decide_boundary_is_inclusive(tau):
    assert decide(Category.ANIMAL, Match("x", Category.ANIMAL, tau), tau) is Decision.FINE_ADOPTED


def test_decide_threshold_above_one_never_fine():
    for sim in np.linspace(-1, 1, 21):
        assert decide(Category.PLANT, Match("x", Category.PLANT, float(sim)), 1.0000001) is not Decision.FINE_ADOPTED


# --- properties over a fixture set -------------------------------------------------

def fixture_set(idx, n=40, seed=3):
    rng = np.random.default_rng(seed)
    coarse, emb, images = {}, {}, []
    for i in range(n):
        img = ImagePayload(f"img{i}".encode())
        images.append(img)
        cat = ["animal", "plant", "other"][i % 3]
        coarse[img.data] = (cat, f"name{i}")
        emb[img.data] = idx.global_mean + rng.normal(size=idx.dim)
    return images, MockGateway(coarse, emb)


def test_fine_set_shrinks_as_threshold_rises():
    idx = breed_index()
    images, gw = fixture_set(idx)
    previous = None
    for tau in np.linspace(-1, 1, 101):
        router = Router(RouterConfig(float(tau)), idx, gw)
        results = [router.recognize(im) for im in images]
        for r in results:
            check_consistency(r, float(tau))
        fine = {im.data for im, r in zip(images, results) if r.granularity is Granularity.FINE}
        if previous is not None:
            assert fine <= previous
        previous = fine


def test_minus_one_threshold_adopts_all_specialized():
    idx = breed_index()
    images, gw = fixture_set(idx)
    router = Router(RouterConfig(-1.0), idx, gw)
    for im in images:
        r = router.recognize(im)
        if gw.coarse[im.data][0] != "other":
            assert r.granularity is Granularity.FINE


def test_result_json_round_trip():
    from hybridrec.router import RecognitionResult

    idx = breed_index()
    gw = MockGateway({DOG.data: ("animal", "Dog")}, {DOG.data: query_with_similarity(idx, "Beagle", 0.8)})
    r = recognize(RouterConfig(0.5), idx, gw, DOG)
    back = RecognitionResult.from_json(r.to_json())
    assert back.label == r.label and back.trace.decision == r.trace.decision
    assert back.trace.retrieval == r.trace.retrieval


def test_swap_index():
    a, b = breed_index(), IndexBuilder().add("X", "animal", [1, 0, 0]).add("Y", "animal", [0, 1, 0]).finalize()
    router = Router(RouterConfig(0.5), a, MockGateway())
    assert router.swap_index(b) is a and router.index is b
