from __future__ import annotations

import json
import re

import httpx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmkg.errors import GatewayError, InputError, TemplateError, ValidationError
from mmkg.gateway import (
    EmbeddingCache,
    Gateway,
    HTTPBackend,
    MockBackend,
    MockRule,
    ModelEndpoint,
    PromptTemplate,
    TransientError,
    cosine,
    load_templates,
)

PLACEHOLDER = re.compile(r"\{[A-Za-z_][A-Za-z0-9_]*\}")


class TestTemplates:
    def test_missing_binding_named(self, make_gateway):
        gw = make_gateway()
        with pytest.raises(TemplateError, match="chunk_text"):
            gw.chat("cmel_alignment", {"img_entity": "X", "img_entity_description": "d",
                                       "possible_image_matched_entities": "[]"})
        assert gw.calls == []

    def test_unknown_template(self, make_gateway):
        with pytest.raises(TemplateError):
            make_gateway().chat("nope", {})

    def test_every_shipped_template_renders_fully(self):
        for tid, tpl in load_templates().items():
            assert tpl.required_bindings, tid
            rendered = tpl.render({k: f"<{k}>" for k in tpl.required_bindings})
            assert not PLACEHOLDER.search(rendered), tid

    @settings(max_examples=200)
    @given(st.dictionaries(st.from_regex(r"[a-z]{1,6}", fullmatch=True), st.text(max_size=10), min_size=1, max_size=4))
    def test_render_never_leaves_placeholders(self, bindings):
        body = " ".join("{%s}" % k for k in bindings) + " tail"
        out = PromptTemplate("t", body).render({k: v.replace("{", "(") for k, v in bindings.items()})
        assert not PLACEHOLDER.search(out)


class TestMock:
    def test_scripted_reply(self, make_gateway):
        gw = make_gateway([{"reply": "DUDLEY", "template_id": "text_answer", "match": {"query": "baby"}}])
        assert gw.chat("text_answer", {"query": "who is the baby", "context": ""}) == "DUDLEY"
        assert gw.chat("text_answer", {"query": "other", "context": ""}).startswith("[mock text_answer ")

    def test_prompt_hash_rule(self, make_gateway):
        gw = make_gateway()
        prompt = gw.render("text_answer", {"query": "q", "context": "c"})
        from mmkg.gateway import sha256_hex

        gw.backend.rules.append(MockRule("hashed", prompt_sha256=sha256_hex(prompt)))
        assert gw.chat("text_answer", {"query": "q", "context": "c"}) == "hashed"

    def test_determinism_across_instances(self, make_gateway):
        a = make_gateway(seed=3).chat("text_answer", {"query": "q", "context": "c"})
        b = make_gateway(seed=3).chat("text_answer", {"query": "q", "context": "c"})
        c = make_gateway(seed=4).chat("text_answer", {"query": "q", "context": "c"})
        assert a == b != c

    def test_image_order_matters(self, make_gateway, png):
        gw = make_gateway()
        a, b = png(), png()
        bind = {"query": "q", "context": "c"}
        assert gw.vision_chat("multimodal_answer", bind, [a, b]) != gw.vision_chat("multimodal_answer", bind, [b, a])
        assert gw.vision_chat("multimodal_answer", bind, [a, b]) == gw.vision_chat("multimodal_answer", bind, [a, b])

    def test_vision_requires_images(self, make_gateway, tmp_path):
        gw = make_gateway()
        with pytest.raises(InputError):
            gw.vision_chat("multimodal_answer", {"query": "q", "context": "c"}, [])
        with pytest.raises(InputError):
            gw.vision_chat("multimodal_answer", {"query": "q", "context": "c"}, [tmp_path / "missing.png"])
        assert gw.calls == []

    def test_fixture_loading(self, tmp_path):
        path = tmp_path / "f.json"
        path.write_text(json.dumps({"dim": 8, "rules": [{"reply": "hi", "template_id": "text_answer"}]}))
        backend = MockBackend.from_fixture(path, seed=1)
        assert backend.dim == 8 and backend.rules[0].reply == "hi"


class TestEmbed:
    def test_duplicates_identical(self, make_gateway):
        v = make_gateway().embed(["a", "a"])
        assert np.array_equal(v[0], v[1])

    def test_self_cosine(self, make_gateway):
        gw = make_gateway()
        assert cosine(gw.embed(["t"])[0], gw.embed(["t"])[0]) == pytest.approx(1.0, abs=1e-9)

    def test_reproducible_across_runs(self, make_gateway):
        assert np.array_equal(make_gateway(seed=9).embed(["x"]), make_gateway(seed=9).embed(["x"]))

    def test_shared_words_are_similar(self, make_gateway):
        v = make_gateway().embed(["red fishing boat", "the red boat", "granite mountain"])
        assert cosine(v[0], v[1]) > 0.5 > cosine(v[0], v[2])

    def test_rejects_empty(self, make_gateway):
        with pytest.raises(InputError):
            make_gateway().embed([])
        with pytest.raises(InputError):
            make_gateway().embed([""])

    def test_cache_coherence(self, make_gateway, tmp_path):
        path = tmp_path / "cache.jsonl"
        first = make_gateway(cache=EmbeddingCache(path)).embed(["alpha", "beta"])
        fresh = make_gateway().embed(["alpha", "beta"])
        reloaded = make_gateway(cache=EmbeddingCache(path))
        again = reloaded.embed(["beta", "alpha"])
        assert np.allclose(first, fresh)
        assert np.array_equal(again, first[::-1])
        assert not any(c.kind == "embed" for c in reloaded.calls)


# -- retries through a fault-injecting HTTP transport -------------------------------


def endpoint(**kw):
    return ModelEndpoint(**{"base_url": "http://models.test/v1", "model_name": "m", "api_key_env": "NO_SUCH_KEY",
                            "timeout_s": 1.0, "max_retries": 2, **kw})


def flaky_transport(failures: int, exc=httpx.ReadTimeout):
    state = {"n": 0}

    def handler(request: httpx.Request) -> httpx.Response:
        state["n"] += 1
        if state["n"] <= failures:
            raise exc("timed out", request=request)
        body = json.loads(request.content)
        if request.url.path.endswith("/embeddings"):
            return httpx.Response(200, json={"data": [{"index": i, "embedding": [1.0, float(i)]}
                                                      for i, _ in enumerate(body["input"])]})
        return httpx.Response(200, json={"choices": [{"message": {"content": "ok"}}]})

    return httpx.MockTransport(handler), state


class TestRetries:
    def test_timeout_then_success(self, tmp_path):
        transport, state = flaky_transport(1)
        log = tmp_path / "t.ndjson"
        gw = Gateway(HTTPBackend(endpoint(), endpoint(), transport=transport), transcript_path=log, sleep=lambda s: None)
        assert gw.chat("text_answer", {"query": "q", "context": "c"}) == "ok"
        assert state["n"] == 2
        [rec] = [json.loads(line) for line in log.read_text().splitlines()]
        assert rec["attempts"] == 2 and rec["ok"] is True
        assert set(rec) >= {"template_id", "bindings_digest", "reply_digest", "latency_ms"}

    def test_exhausted_retries_carry_attempts(self):
        transport, _ = flaky_transport(10, httpx.ConnectError)
        gw = Gateway(HTTPBackend(endpoint(), endpoint(), transport=transport), max_retries=2, sleep=lambda s: None)
        with pytest.raises(GatewayError) as info:
            gw.chat("text_answer", {"query": "q", "context": "c"})
        assert info.value.attempts == 3
        assert gw.calls[-1].ok is False

    def test_backoff_is_exponential(self):
        transport, _ = flaky_transport(2)
        waits = []
        gw = Gateway(HTTPBackend(endpoint(), endpoint(), transport=transport), retry_backoff_s=0.5, sleep=waits.append)
        gw.embed(["a"])
        assert waits == [0.5, 1.0]

    def test_client_error_not_retried(self):
        calls = []

        def handler(request):
            calls.append(request)
            return httpx.Response(400, text="bad")

        gw = Gateway(HTTPBackend(endpoint(), endpoint(), transport=httpx.MockTransport(handler)), sleep=lambda s: None)
        with pytest.raises(GatewayError):
            gw.chat("text_answer", {"query": "q", "context": "c"})
        assert len(calls) == 1

    def test_vision_payload_carries_images_in_order(self, png):
        seen = []

        def handler(request):
            seen.append(json.loads(request.content))
            return httpx.Response(200, json={"choices": [{"message": {"content": "ok"}}]})

        gw = Gateway(HTTPBackend(endpoint(), endpoint(), transport=httpx.MockTransport(handler)))
        a, b = png(), png()
        gw.vision_chat("multimodal_answer", {"query": "q", "context": "c"}, [a, b])
        content = seen[0]["messages"][0]["content"]
        assert [part["type"] for part in content] == ["text", "image_url", "image_url"]
        assert seen[0]["temperature"] == 0 and seen[0]["max_tokens"] == 2048

    def test_mock_transient_error(self, make_gateway):
        class Flaky(MockBackend):
            n = 0

            def complete(self, *a, **kw):
                Flaky.n += 1
                if Flaky.n == 1:
                    raise TransientError("first call times out")
                return super().complete(*a, **kw)

        gw = Gateway(Flaky(), sleep=lambda s: None)
        gw.chat("text_answer", {"query": "q", "context": "c"})
        assert gw.calls[-1].attempts == 2


def test_endpoint_validation():
    with pytest.raises(ValidationError):
        endpoint(timeout_s=0)
    with pytest.raises(ValidationError):
        endpoint(max_retries=-1)
