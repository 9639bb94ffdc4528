import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from weathergen.backends import ChatCompletionBackend
from weathergen.errors import BackendUnavailable, EmptyCompletion, ValidationError
from weathergen.prompts import (
    SOURCE_BANK,
    SOURCE_LLM,
    DescriptorBank,
    PromptTemplate,
    compose_scene,
    enrich,
    fit_budget,
    generate_prompt,
)
from weathergen.retry import RetryPolicy
from weathergen.sampler import ConditionGrid, PlanItem, make_plan

from conftest import ScriptedServer

FAST = RetryPolicy(max_attempts=3, backoff=0)


class CannedBackend:
    def __init__(self, reply):
        self.reply = reply
        self.requests = []

    def complete(self, req):
        self.requests.append(req)
        return self.reply


# -- scene composer -----------------------------------------------------------

def test_compose_matches_template():
    base = compose_scene("motorcycle", "rainy", "daytime", PromptTemplate("V*"))
    assert base.text == "A photo of V* driving scene, motorcycle, rainy, daytime"


def test_compose_without_identifier():
    base = compose_scene("motorcycle", "rainy", "daytime", PromptTemplate(include_identifier=False))
    assert base.text == "A photo of motorcycle, rainy, daytime"


def test_compose_is_pure():
    t = PromptTemplate("sks")
    assert compose_scene("car", "foggy", "nighttime", t) == compose_scene("car", "foggy", "nighttime", t)


def test_compose_slot_containment():
    text = compose_scene("car", "foggy", "nighttime", PromptTemplate("sks")).text
    for token in ("car", "foggy", "nighttime", "sks"):
        assert token in text


@pytest.mark.parametrize("args", [("", "rainy", "day"), ("car", " ", "day"), ("car", "rainy", "")])
def test_compose_empty_slot(args):
    with pytest.raises(ValidationError):
        compose_scene(*args)


@pytest.mark.parametrize("token", ["", "two words", "tab\tbed"])
def test_identifier_must_be_one_word(token):
    with pytest.raises(ValidationError):
        PromptTemplate(token)


def test_custom_pattern():
    t = PromptTemplate.from_dict({"pattern": "{identifier} {scene_noun}: a {cls} on a {weather} {time}"})
    assert compose_scene("bus", "snowy", "nighttime", t).text == "V* driving scene: a bus on a snowy nighttime"
    with pytest.raises(ValidationError):
        PromptTemplate(pattern="A photo of {cls}")
    with pytest.raises(ValidationError):
        PromptTemplate.from_dict({"colour": "red"})


# -- descriptor bank ----------------------------------------------------------

def test_default_bank_covers_default_grid():
    bank = DescriptorBank.default()
    for weather, time in ConditionGrid().cells:
        assert len(bank.cells[(weather, time)]) >= 5
    assert sum(len(v) for v in bank.cells.values()) >= 30


def test_bank_selection_rule(tmp_path):
    doc = {"snowy": {"nighttime": ["f0", "f1", "f2"]}}
    path = tmp_path / "bank.json"
    path.write_text(json.dumps(doc))
    bank = DescriptorBank.load(path)
    base = compose_scene("car", "snowy", "nighttime")
    out = enrich(base, bank, 60, seed=10)
    # 10 mod 3 == 1
    assert out.text == base.text + ", f1"
    assert out.source == SOURCE_BANK
    assert enrich(base, bank, 60, seed=10) == out


def test_bank_missing_cell():
    with pytest.raises(ValidationError):
        DescriptorBank.default().pick("sandstorm", "daytime", 0)


# -- enrichment ---------------------------------------------------------------

def test_llm_reply_used_and_request_shaped():
    base = compose_scene("motorcycle", "rainy", "daytime")
    reply = (
        "A photo of V* driving scene, motorcycle, rainy, daytime, under a grey and overcast sky "
        "with raindrops on the pavement, streetlights casting a warm glow in the late morning rain"
    )
    backend = CannedBackend(reply)
    out = enrich(base, backend, 60)
    assert out.text == reply
    assert "grey and overcast sky with raindrops on the pavement" in out.text
    assert out.source == SOURCE_LLM
    req = backend.requests[0]
    assert req.user_text == base.text
    assert "60 words" in req.instruction


def test_missing_class_is_appended():
    base = compose_scene("rider", "snowy", "nighttime")
    out = enrich(base, CannedBackend("a snowy street at night, lamps glowing"), 60)
    assert out.text == "a snowy street at night, lamps glowing, rider"


def test_long_completion_truncated():
    base = compose_scene("car", "foggy", "daytime")
    words = ["car"] + [f"w{i}" for i in range(399)]
    out = enrich(base, CannedBackend(" ".join(words)), 60)
    assert out.word_count == 60
    assert out.text.split() == words[:60]


def test_long_completion_without_class_keeps_budget():
    base = compose_scene("traffic light", "foggy", "daytime")
    out = enrich(base, CannedBackend(" ".join(["fog"] * 400)), 60)
    assert len(out.text.split()) <= 60
    assert out.text.endswith("traffic light")


def test_class_cut_at_budget_boundary_is_restored():
    text = " ".join(["x"] * 59 + ["traffic", "light"])
    assert fit_budget(text, "traffic light", 60).endswith(", traffic light")
    assert len(fit_budget(text, "traffic light", 60).split()) == 60


def test_substring_is_not_a_match():
    assert fit_budget("a cartoon street", "car", 10) == "a cartoon street, car"


def test_empty_completion():
    with pytest.raises(EmptyCompletion):
        enrich(compose_scene("car", "foggy", "daytime"), CannedBackend("   "), 60)


@given(st.text(min_size=1), st.integers(2, 80))
def test_fit_budget_properties(text, budget):
    if not text.split() or not text.strip().strip("\"'").split():
        return
    out = fit_budget(text, "bus", budget)
    assert len(out.split()) <= budget
    assert "bus" in out


# -- full chain ---------------------------------------------------------------

def item(cls="rider", weather="snowy", time="nighttime", seed=12345, index=0):
    return PlanItem(index, 12, cls, weather, time, seed)


def test_generate_prompt_with_bank():
    spec = generate_prompt(item(), PromptTemplate(), DescriptorBank.default(), 60)
    assert "rider" in spec.enriched_text
    assert "snowy" in spec.enriched_text and "nighttime" in spec.enriched_text
    assert spec.source == SOURCE_BANK
    assert spec.base_text == compose_scene("rider", "snowy", "nighttime").text
    assert spec.enriched_text.startswith(spec.base_text)


def test_generate_prompt_falls_back_when_backend_down():
    dead = ChatCompletionBackend("http://127.0.0.1:9/", timeout=0.5)
    spec = generate_prompt(
        item(), PromptTemplate(), dead, 60, fallback=DescriptorBank.default(), policy=FAST
    )
    assert spec.source == SOURCE_BANK


def test_generate_prompt_without_fallback_raises():
    with pytest.raises(BackendUnavailable):
        generate_prompt(item(), PromptTemplate(), ChatCompletionBackend("http://127.0.0.1:9/", timeout=0.5), 60, policy=FAST)


def test_seed_drives_fragment_choice():
    bank = DescriptorBank.default()
    frags = bank.cells[("snowy", "nighttime")]
    a = generate_prompt(item(seed=0), PromptTemplate(), bank)
    b = generate_prompt(item(seed=1), PromptTemplate(), bank)
    assert a.enriched_text.endswith(frags[0])
    assert b.enriched_text.endswith(frags[1 % len(frags)])
    assert generate_prompt(item(seed=1), PromptTemplate(), bank) == b


def test_chain_over_plan_is_deterministic(table):
    plan = make_plan(table, ConditionGrid(), 60, 11)
    bank = DescriptorBank.default()
    first = [generate_prompt(it, PromptTemplate(), bank) for it in plan.items]
    second = [generate_prompt(it, PromptTemplate(), bank) for it in plan.items]
    assert first == second
    for spec, it in zip(first, plan.items):
        assert spec.base_text == compose_scene(it.class_name, it.weather, it.time).text


def test_llm_over_http_wire_format(monkeypatch):
    monkeypatch.setenv("TEST_TEXT_TOKEN", "s3cret")
    reply = {"choices": [{"message": {"role": "assistant", "content": "rider on a snowy night street"}}]}
    with ScriptedServer([(200, {}, reply)]) as srv:
        backend = ChatCompletionBackend(srv.url, model="llama-3", token_env="TEST_TEXT_TOKEN")
        spec = generate_prompt(item(), PromptTemplate(), backend, 60, temperature=0.2)
    assert spec.enriched_text == "rider on a snowy night street"
    assert spec.source == SOURCE_LLM
    sent = srv.requests[0]
    assert sent["headers"]["Authorization"] == "Bearer s3cret"
    body = sent["json"]
    assert body["model"] == "llama-3"
    assert body["temperature"] == 0.2
    assert body["max_tokens"] >= 60
    assert body["messages"][0]["role"] == "system"
    assert body["messages"][1] == {"role": "user", "content": "A photo of V* driving scene, rider, snowy, nighttime"}
