import json
import random
import threading
import time

import httpx
import pytest

from sgengine.core import BBox, Region, Relation, RelationCategory, SceneGraph
from sgengine.teacher import (
    JUDGE_QUESTION,
    BoundedTransport,
    CachingTransport,
    ChatRequest,
    NonRetryableTransportError,
    RemoteTransport,
    ReplayMissError,
    ReplayTransport,
    ResponderTransport,
    RetryExhaustedError,
    RetryPolicy,
    ScriptedTransport,
    TransientTransportError,
    build_edit_prompt,
    build_judge_prompt,
    build_relation_prompt,
    call_with_retry,
    crop_ref,
    edit_prompt_graph,
    load_transport,
    parse_relation_response,
    send_all,
    system_template,
)

REQ = ChatRequest("sys", "hello", ("img",))


def graph():
    regions = (Region(0, "person", BBox(64, 48, 320, 480), depth=200),
               Region(1, "horse", BBox(0, 0, 640, 240)),
               Region(2, "sky", None))
    return SceneGraph("img7", 640, 480, regions, (Relation(0, 1, "riding",
                                                           RelationCategory.INTERACTIONAL),))


class TestRequest:
    def test_digest_is_stable_and_content_sensitive(self):
        assert REQ.digest == ChatRequest("sys", "hello", ("img",)).digest
        assert REQ.digest != ChatRequest("sys", "hello!", ("img",)).digest
        assert REQ.digest != ChatRequest("sys", "hello", ("img",), temperature=0.0).digest
        assert len(REQ.digest) == 64

    @pytest.mark.parametrize("kw", [{"temperature": -1}, {"top_p": 0}, {"max_tokens": 0}])
    def test_validation(self, kw):
        with pytest.raises(ValueError):
            ChatRequest("s", "u", **kw)


class TestTemplates:
    def test_relation_template(self):
        t = system_template("relation")
        assert t.startswith("You are provided 'Captions', 'Region Captions', 'Scene Graph'")
        assert "normalized from 0 to 1000" in t
        assert "\\\\" not in t and "\\_" not in t

    def test_edit_template(self):
        t = system_template("edit")
        assert "{{'on': [2,3,4,5]}}" in t
        assert t.rstrip().endswith("Output should be a flattened JSON object with no unnecessary spacing.")


class TestPrompts:
    def test_relation_prompt(self):
        req = build_relation_prompt(graph(), ["a rider"], ["a horse"], ["Q: a? A: b"], 3)
        u = req.user_prompt
        assert req.system_prompt == system_template("relation")
        assert (req.temperature, req.top_p) == (0.2, 1.0)
        assert req.image_refs == ("img7",)
        assert "[Captions]\n- a rider" in u
        assert "[Objects]\n0: [100,100,500,1000] person\n1: [0,0,1000,500] horse\n2: [] sky" in u
        assert "0: ([100,100,500,1000], depth 200) [] person [riding 1]" in u
        assert "region0 <mask> <pos> <|box_start|>(100,100),(500,1000)<|box_end|>" in u
        assert "Select at least 3 subjects" in u
        assert u.index("[Captions]") < u.index("[Objects]") < u.index("[Scene Graph]") \
            < u.index("[QAs]") < u.index("[Regions]")

    def test_judge_prompt(self):
        g = graph()
        req = build_judge_prompt(g.regions[0], "riding", g.regions[1], "img7")
        assert req.user_prompt == f'Relation: "person riding horse"\n{JUDGE_QUESTION}'
        assert req.image_refs == (crop_ref("img7", BBox(0, 0, 640, 480)),)
        assert req.image_refs == ("img7#crop=0,0,640,480",)
        assert req.temperature == 0.0 and req.system_prompt == ""

    def test_judge_prompt_without_box(self):
        g = graph()
        assert build_judge_prompt(g.regions[0], "under", g.regions[2], "img7").image_refs == \
            ("img7",)

    def test_edit_prompt(self):
        req = build_edit_prompt(graph(), "A person rides a horse.")
        assert req.system_prompt == system_template("edit")
        body = req.user_prompt.split("Scene graph: ", 1)[1]
        assert json.loads(body) == edit_prompt_graph(graph())
        assert json.loads(body)["0"] == {"name": "person", "bbox": [100, 100, 500, 1000],
                                         "rel": {"riding": [1]}}
        assert " " not in body.replace("person", "").replace("horse", "").replace("sky", "")
        assert req.image_refs == ("img7", "img7#highlight=0", "img7#highlight=1",
                                  "img7#highlight=2")


class TestResponseParsing:
    def test_schema(self):
        text = json.dumps({"subjects": [{"id": 0, "description": "rider", "relations": {
            "Interactional": [["riding", 1]], "spatial relationships": [["on", "1"]],
            "hierarchical": [["part of", 2]]}}]})
        anns, notes = parse_relation_response(text)
        assert anns[0].description == "rider"
        assert anns[0].relations == (("riding", 1, RelationCategory.INTERACTIONAL),
                                     ("on", 1, RelationCategory.SPATIAL),
                                     ("part of", 2, None))
        assert len(notes) == 1

    def test_keyed_by_id_and_dict_items(self):
        text = '{"3": {"description": "cup", "relations": {"spatial": {"on": [4, "x"]}, ' \
               '"functional": [{"predicate": "holds", "object": 5, "category": "social"}]}}}'
        anns, notes = parse_relation_response(text)
        assert anns[0].id == 3
        assert anns[0].relations == (("on", 4, RelationCategory.SPATIAL),
                                     ("holds", 5, RelationCategory.SOCIAL))
        assert notes

    def test_garbage(self):
        anns, notes = parse_relation_response("no idea")
        assert anns == [] and notes


class TestTransports:
    def test_replay(self, tmp_path):
        (tmp_path / f"{REQ.digest}.txt").write_text("canned")
        t = ReplayTransport(tmp_path)
        assert t.send(REQ) == "canned"
        with pytest.raises(ReplayMissError):
            t.send(ChatRequest("x", "y"))
        assert t.calls == 2

    def test_caching_round_trips_into_replay(self, tmp_path):
        inner = ResponderTransport(lambda r: r.user_prompt.upper())
        cache = CachingTransport(inner, tmp_path)
        assert cache.send(REQ) == "HELLO"
        assert cache.send(REQ) == "HELLO"
        assert (inner.calls, cache.hits, cache.misses) == (1, 1, 1)
        assert ReplayTransport(tmp_path).send(REQ) == "HELLO"
        assert not list(tmp_path.glob("*.tmp*"))

    def test_scripted_repeats_last(self):
        t = ScriptedTransport(["a", "b"])
        assert [t.send(REQ) for _ in range(3)] == ["a", "b", "b"]
        with pytest.raises(ValueError):
            ScriptedTransport([])

    def test_bounded_caps_concurrency(self):
        active, peak = 0, 0
        lock = threading.Lock()

        def slow(_r):
            nonlocal active, peak
            with lock:
                active += 1
                peak = max(peak, active)
            time.sleep(0.01)
            with lock:
                active -= 1
            return "ok"

        t = BoundedTransport(ResponderTransport(slow), 2)
        reqs = [ChatRequest("s", str(i)) for i in range(12)]
        assert send_all(t, reqs, max_workers=6) == ["ok"] * 12
        assert peak <= 2


class TestRetry:
    def test_recovers_from_transient(self):
        t = ScriptedTransport([TransientTransportError("503"), TimeoutError(), "fine"])
        sleeps = []
        out = call_with_retry(t, REQ, RetryPolicy(max_attempts=3, base_delay=1, jitter=0),
                              sleep=sleeps.append)
        assert out == "fine"
        assert sleeps == [1.0, 2.0]

    def test_non_retryable_not_retried(self):
        t = ScriptedTransport([NonRetryableTransportError("401"), "never"])
        with pytest.raises(NonRetryableTransportError):
            call_with_retry(t, REQ, sleep=lambda s: None)
        assert t.calls == 1

    def test_exhausted(self):
        t = ScriptedTransport([TransientTransportError("boom")])
        with pytest.raises(RetryExhaustedError) as info:
            call_with_retry(t, REQ, RetryPolicy(max_attempts=4), sleep=lambda s: None)
        assert info.value.attempts == 4 and t.calls == 4

    def test_delay_bounds(self):
        p = RetryPolicy(base_delay=0.5, multiplier=2, max_delay=3, jitter=0.25)
        rng = random.Random(0)
        for attempt in range(1, 8):
            base = min(0.5 * 2 ** (attempt - 1), 3)
            assert base <= p.delay(attempt, rng) <= base * 1.25

    def test_send_all_keeps_order(self):
        t = ResponderTransport(lambda r: r.user_prompt)
        reqs = [ChatRequest("s", str(i)) for i in range(20)]
        assert send_all(t, reqs, max_workers=5) == [str(i) for i in range(20)]


def _remote(handler):
    client = httpx.Client(transport=httpx.MockTransport(handler))
    return RemoteTransport("https://api.example/v1/", "teacher-x", "sk-test", client=client)


class TestRemote:
    def test_payload_and_parsing(self):
        seen = {}

        def handler(request: httpx.Request):
            seen["url"] = str(request.url)
            seen["auth"] = request.headers.get("authorization")
            seen["body"] = json.loads(request.content)
            return httpx.Response(200, json={"choices": [{"message": {"content": "Yes"}}]})

        assert _remote(handler).send(REQ) == "Yes"
        assert seen["url"] == "https://api.example/v1/chat/completions"
        assert seen["auth"] == "Bearer sk-test"
        body = seen["body"]
        assert body["model"] == "teacher-x" and body["temperature"] == 0.2
        assert body["messages"][0] == {"role": "system", "content": "sys"}
        assert body["messages"][1]["content"][1] == {"type": "image_url",
                                                     "image_url": {"url": "img"}}

    @pytest.mark.parametrize("status,exc", [(401, NonRetryableTransportError),
                                            (422, NonRetryableTransportError),
                                            (429, TransientTransportError),
                                            (503, TransientTransportError)])
    def test_status_mapping(self, status, exc):
        with pytest.raises(exc):
            _remote(lambda r: httpx.Response(status, text="err")).send(REQ)

    def test_timeout_and_bad_body(self):
        def timeout(r):
            raise httpx.ReadTimeout("slow", request=r)
        with pytest.raises(TransientTransportError):
            _remote(timeout).send(REQ)
        with pytest.raises(TransientTransportError):
            _remote(lambda r: httpx.Response(200, json={"nope": 1})).send(REQ)

    def test_retry_over_http(self):
        answers = iter([httpx.Response(502), httpx.Response(200, json={
            "choices": [{"message": {"content": [{"type": "text", "text": "No"}]}}]})])
        out = call_with_retry(_remote(lambda r: next(answers)), REQ, sleep=lambda s: None)
        assert out == "No"


class TestLoadTransport:
    def test_replay_config_relative_paths(self, tmp_path):
        (tmp_path / "fx").mkdir()
        cfg = tmp_path / "judge.json"
        cfg.write_text(json.dumps({"kind": "replay", "fixtures": "fx",
                                   "retry": {"max_attempts": 5}}))
        tc = load_transport(cfg, name="judge_a")
        assert isinstance(tc.transport, ReplayTransport)
        assert tc.transport.fixture_dir == tmp_path / "fx"
        assert tc.retry.max_attempts == 5 and tc.name == "judge_a"

    def test_remote_with_cache_and_bound(self, tmp_path, monkeypatch):
        monkeypatch.setenv("MY_KEY", "secret")
        tc = load_transport({"kind": "remote", "endpoint": "http://x", "model": "m",
                             "api_key_env": "MY_KEY", "cache": str(tmp_path / "c"),
                             "max_in_flight": 2})
        assert isinstance(tc.transport, BoundedTransport)
        assert isinstance(tc.transport.inner, CachingTransport)
        assert tc.transport.inner.inner.api_key == "secret"

    @pytest.mark.parametrize("cfg", [{"kind": "replay"}, {"kind": "remote", "model": "m"},
                                     {"kind": "carrier-pigeon"}])
    def test_bad_configs(self, cfg):
        with pytest.raises(ValueError):
            load_transport(cfg)
