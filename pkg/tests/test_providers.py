import base64
import json
import logging
import math

import httpx
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from textdissect import providers as prov
from textdissect.errors import ContentPolicyError, ProtocolError, TransportError
from textdissect.providers import EMPTY_CAPTION, ProbabilityVector, RenderedSample, RetryPolicy
from textdissect.providers.base import IMAGE, SIMULATED_TEXT
from textdissect.providers.http import (
    HttpCaptioner,
    HttpChat,
    HttpClassifier,
    HttpEmbedder,
    HttpGenerator,
    RateLimiter,
    RecordedTransport,
    RecordingTransport,
)
from textdissect.providers.simulation import (
    IdentityGenerator,
    LexicalWorldClassifier,
    LexicalWorldSpec,
    SimCaptioner,
    ToyEmbedder,
    lexical_world_score,
)

# 1x1 transparent PNG
PNG = base64.b64decode("iVBORw0KGgoAAAANSUhEUgAAAAEAAAABCAQAAAC1HAwCAAAAC0lEQVR42mNkYAAAAAYAAjCB0C8AAAAASUVORK5CYII=")


def world(*keyword_maps, sigma=0.0, temperature=1.0):
    return LexicalWorldSpec(tuple(keyword_maps), noise_sigma=sigma, temperature=temperature, rng_seed=3)


# --- simulation ---------------------------------------------------------------

def test_identity_generator_carries_text():
    s = IdentityGenerator().generate("a bird")
    assert s.media_kind == SIMULATED_TEXT and s.carried_text == "a bird" and s.payload is None


def test_identity_generator_blocks_words():
    with pytest.raises(ContentPolicyError):
        IdentityGenerator(["gore"]).generate("some gore here")


def test_keyword_softmax_by_hand():
    p = lexical_world_score(world({"bird": 2.0}, {"tree": 1.0}), "a bird")
    assert p[0] > 0.5
    assert p[0] == pytest.approx(math.exp(2) / (math.exp(2) + 1), abs=1e-12)


def test_symmetry_cases():
    w = world({"bird": 1.0}, {"bird": 1.0}, {"tree": 1.0})
    p = lexical_world_score(w, "a red car")
    assert np.allclose(p, 1 / 3, atol=0)
    p = lexical_world_score(w, "a bird")
    assert p[0] == p[1]


def test_monotone_in_matched_weight_and_temperature_limit():
    w = world({"snow": 1.0, "sled": 1.0}, {"rock": 1.0})
    assert lexical_world_score(w, "snow sled")[0] > lexical_world_score(w, "snow")[0]
    hot = world({"snow": 1.0, "sled": 1.0}, {"rock": 1.0}, temperature=1e6)
    assert np.allclose(lexical_world_score(hot, "snow sled"), 0.5, atol=1e-5)


def test_noise_is_reproducible():
    w = world({"snow": 1.0}, {"sled": 1.0}, sigma=0.5)
    a = lexical_world_score(w, "snow", step=4)
    assert np.array_equal(a, lexical_world_score(w, "snow", step=4))
    assert not np.array_equal(a, lexical_world_score(w, "snow", step=5))
    clf = LexicalWorldClassifier(w)
    sample = IdentityGenerator().generate("snow")
    first, second = clf.classify(sample), clf.classify(sample)
    assert first == lexical_world_score(w, "snow", 0).tolist()
    assert second == lexical_world_score(w, "snow", 1).tolist()


def test_world_roundtrip_and_validation():
    w = world({"snow": 1.0}, {"sled": 2.0})
    assert LexicalWorldSpec.from_dict(w.to_dict()).to_dict() == w.to_dict()
    assert w.vocabulary() == ["snow", "sled"]
    with pytest.raises(ValueError):
        world({"snow": 1.0}, {})  # every class needs a keyword
    with pytest.raises(ValueError):
        world({"snow": float("inf")})
    with pytest.raises(ValueError):
        LexicalWorldSpec(({"a": 1.0}, {}), temperature=0.0)


def test_toy_embedder_properties():
    e = ToyEmbedder()
    assert np.array_equal(e.embed("snow sled"), e.embed("snow sled"))
    assert float(e.embed("snow sled") @ e.embed("sled snow")) == pytest.approx(1.0, abs=1e-15)
    left, right = "snow sled husky", "beach wave sand"
    buckets = {e.bucket(t) for t in left.split()} & {e.bucket(t) for t in right.split()}
    assert not buckets  # collision check for the fixed strings
    assert float(e.embed(left) @ e.embed(right)) == 0.0
    # half-overlapping bags of two words: one shared bucket of two, cosine 1/2
    assert float(e.embed("snow sled") @ e.embed("snow husky")) == pytest.approx(0.5, abs=1e-15)
    with pytest.raises(ValueError):
        e.embed("!!!")


@given(st.lists(st.sampled_from(["snow", "sled", "husky", "rock", "beach"]), min_size=1, max_size=8))
def test_toy_embedding_is_unit_norm(words):
    v = ToyEmbedder(dim=64).embed(" ".join(words))
    assert np.linalg.norm(v) == pytest.approx(1.0, abs=1e-12)


def test_sim_captioner_orders_by_salience(waterbirds_world):
    cap = SimCaptioner(waterbirds_world)
    s = IdentityGenerator().generate("a picture of a bird on a branch near grass")
    assert cap.caption(s, 3) == ["branch", "bird", "grass"]
    assert SimCaptioner().caption(s, 2) == ["picture", "bird"]


def test_caption_contract(caplog):
    class Fixed:
        def __init__(self, out):
            self.out = out

        def caption(self, sample, n):
            return list(self.out)

    sample = RenderedSample("x", IMAGE, payload=PNG)
    five = ["a", "b", "c", "d", "e"]
    assert prov.caption(sample, Fixed(five), 5) == five
    with caplog.at_level(logging.WARNING):
        assert prov.caption(sample, Fixed(five[:3]), 5) == ["a", "b", "c", EMPTY_CAPTION, EMPTY_CAPTION]
    assert "expected 5" in caplog.text


# --- contracts ------------------------------------------------------------------

def test_rendered_sample_exactly_one_payload():
    with pytest.raises(ValueError):
        RenderedSample("x", IMAGE)
    with pytest.raises(ValueError):
        RenderedSample("x", SIMULATED_TEXT, payload=b"1", carried_text="x")


def test_probability_vector(caplog):
    assert ProbabilityVector((0.2, 0.8)).argmax() == 1
    assert ProbabilityVector((0.5, 0.5)).argmax() == 0
    with pytest.raises(ProtocolError):
        ProbabilityVector((0.2, 0.2))
    with caplog.at_level(logging.WARNING):
        assert ProbabilityVector.from_raw([0.2, 0.6]).values == pytest.approx((0.25, 0.75))
    assert "renormalized" in caplog.text
    with pytest.raises(ProtocolError):
        ProbabilityVector.from_raw([0.1, 0.1])
    with pytest.raises(ProtocolError):
        ProbabilityVector.from_raw([-0.1, 1.1])


def test_generate_rejects_empty_and_long_prompts():
    with pytest.raises(ValueError):
        prov.generate("  ", IdentityGenerator())
    with pytest.raises(ValueError):
        prov.generate("x" * 1001, IdentityGenerator())


def test_retry_backoff_is_capped():
    r = RetryPolicy(base_delay=1.0, max_delay=3.0)
    assert [r.delay(i) for i in range(4)] == [1.0, 2.0, 3.0, 3.0]


# --- HTTP -----------------------------------------------------------------------

def mock_client(handler):
    return httpx.Client(transport=httpx.MockTransport(handler))


def test_http_generator_returns_fixture_bytes():
    seen = []

    def handler(request):
        seen.append(json.loads(request.content))
        return httpx.Response(200, json={"image": base64.b64encode(PNG).decode()})

    gen = HttpGenerator("http://gen/render", steps=1, seed=9, client=mock_client(handler))
    s = gen.generate("a bird")
    assert s.payload == PNG and s.media_kind == IMAGE
    assert seen == [{"prompt": "a bird", "steps": 1, "seed": 9}]


def test_http_generator_rejection():
    gen = HttpGenerator("http://gen", client=mock_client(
        lambda r: httpx.Response(200, json={"rejected": True, "reason": "policy"})))
    with pytest.raises(ContentPolicyError, match="policy"):
        gen.generate("x")


@pytest.mark.parametrize("status,exc", [(500, TransportError), (503, TransportError), (429, TransportError),
                                        (404, ProtocolError), (400, ProtocolError)])
def test_http_status_mapping(status, exc):
    chat = HttpChat("http://chat/v1", "m", client=mock_client(lambda r: httpx.Response(status, json={})))
    with pytest.raises(exc):
        chat.complete([{"role": "user", "content": "hi"}])


def test_http_timeouts_and_bad_bodies():
    def timeout(request):
        raise httpx.ReadTimeout("slow", request=request)

    with pytest.raises(TransportError):
        HttpEmbedder("http://emb", client=mock_client(timeout)).embed("x")
    bad = HttpEmbedder("http://emb", client=mock_client(lambda r: httpx.Response(200, content=b"<html>")))
    with pytest.raises(ProtocolError):
        bad.embed("x")
    chat = HttpChat("http://chat", "m", client=mock_client(lambda r: httpx.Response(200, json={"choices": []})))
    with pytest.raises(ProtocolError):
        chat.complete([])


def test_http_chat_wire_shape_and_auth():
    seen = []

    def handler(request):
        seen.append((str(request.url), request.headers.get("authorization"), json.loads(request.content)))
        return httpx.Response(200, json={"choices": [{"message": {"content": "add snow"}}]})

    chat = HttpChat("http://chat/v1/", "gpt-oss:120b", key="k1", temperature=0.7, client=mock_client(handler))
    assert chat.complete([{"role": "user", "content": "hi"}]) == "add snow"
    url, auth, body = seen[0]
    assert url == "http://chat/v1/chat/completions" and auth == "Bearer k1"
    assert body == {"model": "gpt-oss:120b", "messages": [{"role": "user", "content": "hi"}], "temperature": 0.7}


def test_http_classifier_json_and_multipart():
    seen = []

    def handler(request):
        seen.append(request)
        return httpx.Response(200, json={"probs": [0.25, 0.75]})

    sample = RenderedSample("x", IMAGE, payload=PNG)
    clf = HttpClassifier("http://clf", client=mock_client(handler))
    assert clf.classify(sample) == [0.25, 0.75]
    assert json.loads(seen[0].content) == {"image": base64.b64encode(PNG).decode()}
    multi = HttpClassifier("http://clf", upload="multipart", client=mock_client(handler))
    multi.classify(sample)
    assert seen[1].headers["content-type"].startswith("multipart/form-data")
    assert PNG in seen[1].read()


def test_http_classifier_class_count_must_not_change():
    answers = iter([[0.5, 0.5], [0.2, 0.3, 0.5]])
    clf = HttpClassifier("http://clf", client=mock_client(lambda r: httpx.Response(200, json={"probs": next(answers)})))
    sample = RenderedSample("x", IMAGE, payload=PNG)
    clf.classify(sample)
    with pytest.raises(ProtocolError):
        clf.classify(sample)


def test_http_embedder_and_captioner():
    emb = HttpEmbedder("http://emb", client=mock_client(lambda r: httpx.Response(200, json={"vector": [0.6, 0.8]})))
    assert emb.embed("x").tolist() == [0.6, 0.8]
    seen = []

    def handler(request):
        seen.append(json.loads(request.content))
        return httpx.Response(200, json={"descriptors": ["branch", "bird", "tree", "sky", "leaf"]})

    cap = HttpCaptioner("http://cap", client=mock_client(handler))
    out = prov.caption(RenderedSample("x", IMAGE, payload=PNG), cap, 5)
    assert out == ["branch", "bird", "tree", "sky", "leaf"]
    assert seen[0]["n"] == 5


def test_recorded_transport_replays_and_records(tmp_path):
    exchanges = [{"request": {"method": "POST", "url": "http://emb/", "json": {"input": "x"}},
                  "response": {"status": 200, "json": {"vector": [1.0, 0.0]}}}]
    path = tmp_path / "rec.json"
    path.write_text(json.dumps(exchanges))
    emb = HttpEmbedder("http://emb/", client=httpx.Client(transport=RecordedTransport.load(path)))
    assert emb.embed("x").tolist() == [1.0, 0.0]
    with pytest.raises(ProtocolError):
        emb.embed("unrecorded")
    rec = RecordingTransport(RecordedTransport(exchanges))
    HttpEmbedder("http://emb/", client=httpx.Client(transport=rec)).embed("x")
    rec.save(tmp_path / "out.json")
    assert json.loads((tmp_path / "out.json").read_text()) == exchanges


def test_rate_limiter_spaces_requests():
    now = [0.0]
    sleeps = []

    def sleep(s):
        sleeps.append(s)
        now[0] += s

    lim = RateLimiter(max_concurrency=2, min_interval=1.0, clock=lambda: now[0], sleep=sleep)
    for _ in range(3):
        with lim:
            pass
    assert sleeps == [1.0, 1.0]
