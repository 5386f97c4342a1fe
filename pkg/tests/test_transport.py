"""Transport: stage params, scripted mock, retry, HTTP wire format."""

from __future__ import annotations

import json
import socket

import pytest

from fot.domain import UsageSource
from fot.errors import MissingScript, StageCapExceeded, TransportError
from fot.transport import (
    BackendKind,
    BackendSpec,
    GenerationParams,
    HttpChatBackend,
    ScriptEntry,
    Stage,
    approx_token_count,
    backend_spec_from_dict,
    default_stage_params,
    fingerprint,
    load_script,
    with_retry,
)

from conftest import any_entry, make_mock


class TestDefaultStageParams:
    def test_caps(self):
        params = default_stage_params()
        assert params[Stage.SOLVE].max_output_tokens == 32768
        assert params[Stage.REFLECT].max_output_tokens == 16384
        assert params[Stage.EXTRACT].max_output_tokens == 8192
        assert params[Stage.PROFILE].max_output_tokens == 32768
        assert params[Stage.BUILD_LIBRARY].max_output_tokens == 16384

    def test_sampling_defaults(self):
        for p in default_stage_params().values():
            assert p.temperature == 0.7
            assert p.top_p == 0.9
            assert p.repetition_penalty is None

    def test_params_validation(self):
        with pytest.raises(ValueError):
            GenerationParams(temperature=-0.1, top_p=0.9, max_output_tokens=10)
        with pytest.raises(ValueError):
            GenerationParams(temperature=0.7, top_p=0.0, max_output_tokens=10)
        with pytest.raises(ValueError):
            GenerationParams(temperature=0.7, top_p=0.9, max_output_tokens=0)


class TestBackendSpec:
    def test_http_requires_endpoint_and_credential(self):
        with pytest.raises(ValueError):
            BackendSpec(kind=BackendKind.HTTP_CHAT, model_name="m")

    def test_from_dict_merges_stage_overrides(self):
        spec = backend_spec_from_dict(
            {
                "kind": "scripted_mock",
                "model_name": "m",
                "params_by_stage": {"extract": {"max_output_tokens": 1024}},
            }
        )
        assert spec.params_for(Stage.EXTRACT).max_output_tokens == 1024
        assert spec.params_for(Stage.SOLVE).max_output_tokens == 32768


class TestScriptedMock:
    def test_scripted_fingerprint_reply(self):
        prompt = "Problem: What is 2+2?"
        entry = ScriptEntry(
            stage=Stage.SOLVE,
            match=fingerprint(Stage.SOLVE, prompt),
            response="Adding gives us the result.\n\\boxed{4}",
        )
        backend = make_mock([entry])
        exchange = backend.complete(Stage.SOLVE, prompt)
        assert "\\boxed{4}" in exchange.response

    def test_referential_transparency(self):
        prompt = "Problem: What is 2+2?"
        entry = ScriptEntry(
            stage=Stage.SOLVE, match=fingerprint(Stage.SOLVE, prompt), response="\\boxed{4}"
        )
        backend = make_mock([entry])
        first = backend.complete(Stage.SOLVE, prompt)
        second = backend.complete(Stage.SOLVE, prompt)
        assert first.response == second.response

    def test_fingerprint_normalizes_whitespace(self):
        assert fingerprint(Stage.SOLVE, "a  b\nc") == fingerprint(Stage.SOLVE, "a b c")
        assert fingerprint(Stage.SOLVE, "a b") != fingerprint(Stage.REFLECT, "a b")

    def test_queue_consumed_in_order(self):
        backend = make_mock([any_entry(Stage.SOLVE, "first"), any_entry(Stage.SOLVE, "second")])
        assert backend.complete(Stage.SOLVE, "x").response == "first"
        assert backend.complete(Stage.SOLVE, "y").response == "second"

    def test_missing_script(self):
        backend = make_mock([any_entry(Stage.SOLVE, "only solve")])
        with pytest.raises(MissingScript):
            backend.complete(Stage.REFLECT, "x")

    def test_queue_exhaustion(self):
        backend = make_mock([any_entry(Stage.SOLVE, "one")])
        backend.complete(Stage.SOLVE, "x")
        with pytest.raises(MissingScript):
            backend.complete(Stage.SOLVE, "x")

    def test_scripted_usage_is_provider_reported(self):
        backend = make_mock([any_entry(Stage.EXTRACT, "{}", completion_tokens=100)])
        exchange = backend.complete(Stage.EXTRACT, "p")
        assert exchange.usage.completion_tokens == 100
        assert exchange.usage.source is UsageSource.PROVIDER_REPORTED

    def test_extract_cap_respected(self):
        backend = make_mock([any_entry(Stage.EXTRACT, "{}", completion_tokens=8192)])
        exchange = backend.complete(Stage.EXTRACT, "p")
        assert exchange.usage.completion_tokens <= 8192

    def test_cap_violation_rejected(self):
        backend = make_mock([any_entry(Stage.EXTRACT, "{}", completion_tokens=8193)])
        with pytest.raises(StageCapExceeded):
            backend.complete(Stage.EXTRACT, "p")

    def test_synthesized_usage_clamped_to_cap(self):
        spec = backend_spec_from_dict(
            {
                "kind": "scripted_mock",
                "model_name": "m",
                "params_by_stage": {"solve": {"max_output_tokens": 3}},
            }
        )
        from fot.transport import ScriptedMockBackend

        backend = ScriptedMockBackend(spec, [any_entry(Stage.SOLVE, "a b c d e f g")])
        exchange = backend.complete(Stage.SOLVE, "p")
        assert exchange.usage.completion_tokens == 3
        assert exchange.usage.source is UsageSource.APPROXIMATED

    def test_empty_prompt_rejected(self):
        backend = make_mock([any_entry(Stage.SOLVE, "x")])
        with pytest.raises(ValueError):
            backend.complete(Stage.SOLVE, "")

    def test_load_script_file(self, tmp_path):
        path = tmp_path / "script.json"
        path.write_text(
            json.dumps(
                [
                    {"stage": "solve", "match": "any", "response": "\\boxed{4}"},
                    {
                        "stage": "extract",
                        "match": "abcdef",
                        "response": "{}",
                        "completion_tokens": 5,
                    },
                ]
            )
        )
        entries = load_script(path)
        assert entries[0].stage is Stage.SOLVE
        assert entries[0].match == "any"
        assert entries[1].completion_tokens == 5


class TestWithRetry:
    def test_third_attempt_succeeds(self):
        calls = []

        def flaky():
            calls.append(1)
            if len(calls) < 3:
                raise TransportError("transient")
            return "ok"

        assert with_retry(flaky, attempts=3, base_delay=0, sleep=lambda _: None) == "ok"
        assert len(calls) == 3

    def test_single_attempt_immediate_success(self):
        calls = []

        def fine():
            calls.append(1)
            return "ok"

        assert with_retry(fine, attempts=1, base_delay=0) == "ok"
        assert len(calls) == 1

    def test_exhaustion_after_exact_attempt_count(self):
        calls = []

        def broken():
            calls.append(1)
            raise TransportError("still down")

        with pytest.raises(TransportError):
            with_retry(broken, attempts=2, base_delay=0, sleep=lambda _: None)
        assert len(calls) == 2

    def test_non_retryable_fails_fast(self):
        calls = []

        def denied():
            calls.append(1)
            raise TransportError("bad auth", retryable=False)

        with pytest.raises(TransportError):
            with_retry(denied, attempts=5, base_delay=0, sleep=lambda _: None)
        assert len(calls) == 1

    def test_backoff_doubles(self):
        delays = []

        def broken():
            raise TransportError("down")

        with pytest.raises(TransportError):
            with_retry(broken, attempts=3, base_delay=1.0, sleep=delays.append)
        assert delays == [1.0, 2.0]

    def test_zero_attempts_invalid(self):
        with pytest.raises(ValueError):
            with_retry(lambda: None, attempts=0)


def _refused_port() -> int:
    sock = socket.socket()
    sock.bind(("127.0.0.1", 0))
    port = sock.getsockname()[1]
    sock.close()
    return port


class TestHttpBackend:
    def _spec(self, endpoint: str, attempts: int = 2) -> BackendSpec:
        return BackendSpec(
            kind=BackendKind.HTTP_CHAT,
            model_name="test-model",
            endpoint=endpoint,
            credential_env="FOT_TEST_KEY",
            max_attempts=attempts,
            retry_base_delay=0.001,
            request_timeout=2.0,
        )

    def test_unreachable_endpoint_raises_after_retries(self, monkeypatch):
        monkeypatch.setenv("FOT_TEST_KEY", "k")
        port = _refused_port()
        backend = HttpChatBackend(self._spec(f"http://127.0.0.1:{port}/v1/chat"))
        attempts = []
        original = backend._request_once

        def counting(stage, prompt, params):
            attempts.append(1)
            return original(stage, prompt, params)

        backend._request_once = counting
        with pytest.raises(TransportError):
            backend.complete(Stage.SOLVE, "hello")
        assert len(attempts) == 2

    def test_missing_credential_not_retried(self, monkeypatch):
        monkeypatch.delenv("FOT_TEST_KEY", raising=False)
        backend = HttpChatBackend(self._spec("http://127.0.0.1:1/v1/chat"))
        with pytest.raises(TransportError) as err:
            backend.complete(Stage.SOLVE, "hello")
        assert not err.value.retryable

    def test_wire_format(self, monkeypatch):
        monkeypatch.setenv("FOT_TEST_KEY", "secret")
        captured = {}

        class FakeResponse:
            status_code = 200
            text = ""

            def json(self):
                return {
                    "choices": [{"message": {"content": "\\boxed{4}"}}],
                    "usage": {"prompt_tokens": 11, "completion_tokens": 9},
                }

        class FakeSession:
            def post(self, url, json=None, headers=None, timeout=None):
                captured.update(url=url, payload=json, headers=headers)
                return FakeResponse()

        backend = HttpChatBackend(self._spec("http://api.example/v1/chat"), session=FakeSession())
        exchange = backend.complete(Stage.SOLVE, "What is 2+2?")
        payload = captured["payload"]
        assert payload["model"] == "test-model"
        assert payload["messages"] == [{"role": "user", "content": "What is 2+2?"}]
        assert payload["temperature"] == 0.7
        assert payload["top_p"] == 0.9
        assert payload["max_tokens"] == 32768
        assert captured["headers"]["Authorization"] == "Bearer secret"
        assert exchange.response == "\\boxed{4}"
        assert exchange.usage.completion_tokens == 9
        assert exchange.usage.source is UsageSource.PROVIDER_REPORTED

    def test_rate_limit_is_retryable(self, monkeypatch):
        monkeypatch.setenv("FOT_TEST_KEY", "k")
        attempts = []

        class Flaky429:
            def post(self, url, json=None, headers=None, timeout=None):
                attempts.append(1)

                class R:
                    status_code = 429 if len(attempts) == 1 else 200
                    text = "slow down"

                    def json(self):
                        return {"choices": [{"message": {"content": "ok"}}], "usage": {}}

                return R()

        backend = HttpChatBackend(self._spec("http://api.example/v1/chat"), session=Flaky429())
        exchange = backend.complete(Stage.SOLVE, "x")
        assert exchange.response == "ok"
        assert len(attempts) == 2
        # No usage reported: falls back to the approximate tokenizer.
        assert exchange.usage.source is UsageSource.APPROXIMATED


class TestApproxTokenCount:
    def test_words_and_punctuation(self):
        assert approx_token_count("hello, world") == 3

    def test_empty(self):
        assert approx_token_count("") == 0


class TestInFlightLimit:
    def test_concurrent_calls_throttled(self):
        import threading
        import time as time_mod

        from fot.transport import ChatBackend

        peak = {"now": 0, "max": 0}
        lock = threading.Lock()

        class SlowBackend(ChatBackend):
            def _respond(self, stage, prompt, params):
                with lock:
                    peak["now"] += 1
                    peak["max"] = max(peak["max"], peak["now"])
                time_mod.sleep(0.01)
                with lock:
                    peak["now"] -= 1
                return "ok", None

        spec = BackendSpec(
            kind=BackendKind.SCRIPTED_MOCK, model_name="slow", max_in_flight=2
        )
        backend = SlowBackend(spec)
        threads = [
            __import__("threading").Thread(
                target=lambda: backend.complete(Stage.SOLVE, "x")
            )
            for _ in range(6)
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert peak["max"] <= 2
