"""Backends, transcript record/replay, prompt templates, and the scripted rule table."""

from __future__ import annotations

import json

import pytest

from helpers import make_log, make_metrics, make_requirement
from rewardsearch import prompts, rdsl, rewards, scripted
from rewardsearch.analyzer import summarize
from rewardsearch.llm import (
    BackendError,
    ChatRequest,
    ChatResponse,
    HttpBackend,
    ReplayBackend,
    ScriptedBackend,
    ScriptedRule,
    TranscriptRecorder,
    extract_code_block,
    extract_component,
    load_transcript,
)
from rewardsearch.search import validate_directives


class EchoBackend:
    def complete(self, request: ChatRequest) -> ChatResponse:
        return ChatResponse(
            text=f"echo:{request.template_id}:{len(request.text())}",
            prompt_tokens=3,
            completion_tokens=7,
            latency_s=0.123,
        )


def _requests(n: int) -> list[ChatRequest]:
    return [prompts.render("summarize_rephrase", {"headline": f"headline {i}"}) for i in range(n)]


# ---------------------------------------------------------------------------
# Scripted backend mechanics
# ---------------------------------------------------------------------------


def test_scripted_backend_first_matching_rule_wins():
    rules = [
        ScriptedRule("narrow", lambda r: "abc" in r.text(), lambda r: "narrow"),
        ScriptedRule("broad", lambda r: True, lambda r: "broad"),
    ]
    backend = ScriptedBackend(rules)
    req = ChatRequest(messages=(("user", "abc def"),))
    assert backend.complete(req).text == "narrow"
    other = ChatRequest(messages=(("user", "xyz"),))
    assert backend.complete(other).text == "broad"


def test_scripted_backend_unmatched_prompt_is_an_error():
    backend = ScriptedBackend([])
    req = ChatRequest(messages=(("user", "hello"),), template_id="critic")
    with pytest.raises(BackendError) as exc:
        backend.complete(req)
    assert exc.value.kind == "no-rule"
    assert "critic" in str(exc.value)


def test_http_backend_requires_api_key(monkeypatch):
    monkeypatch.delenv("SOME_UNSET_KEY_VAR", raising=False)
    backend = HttpBackend("http://localhost:9", model="m", api_key_env="SOME_UNSET_KEY_VAR")
    with pytest.raises(BackendError) as exc:
        backend.complete(ChatRequest(messages=(("user", "hi"),)))
    assert exc.value.kind == "auth"
    assert "SOME_UNSET_KEY_VAR" in str(exc.value)


# ---------------------------------------------------------------------------
# Transcript recording and replay
# ---------------------------------------------------------------------------


def test_recorder_builds_a_hash_chain():
    rec = TranscriptRecorder(EchoBackend())
    for req in _requests(3):
        rec.complete(req)
    assert [e["index"] for e in rec.entries] == [0, 1, 2]
    assert rec.entries[0]["prev_hash"] == ""
    assert rec.entries[1]["prev_hash"] == rec.entries[0]["hash"]
    assert rec.entries[2]["prev_hash"] == rec.entries[1]["hash"]
    assert len(set(e["hash"] for e in rec.entries)) == 3


def test_recorder_hash_ignores_timestamp_and_latency():
    a = TranscriptRecorder(EchoBackend())
    b = TranscriptRecorder(EchoBackend())
    for req in _requests(2):
        a.complete(req)
    for req in _requests(2):
        b.complete(req)
    assert [e["hash"] for e in a.entries] == [e["hash"] for e in b.entries]
    # tampering with the excluded fields does not break replay
    entries = [dict(e) for e in a.entries]
    for e in entries:
        e["timestamp"] = 0.0
        e["response"] = dict(e["response"], latency_s=99.0)
    replay = ReplayBackend(entries)
    for req in _requests(2):
        resp = replay.complete(req)
        assert resp.text.startswith("echo:")
        assert resp.latency_s == 99.0


def test_recorder_writes_jsonl(tmp_path):
    path = tmp_path / "transcript.jsonl"
    rec = TranscriptRecorder(EchoBackend(), path=str(path))
    for req in _requests(3):
        rec.complete(req)
    loaded = load_transcript(str(path))
    assert loaded == rec.entries


def test_replay_returns_recorded_responses_in_order():
    rec = TranscriptRecorder(EchoBackend())
    reqs = _requests(3)
    originals = [rec.complete(r).text for r in reqs]
    replay = ReplayBackend(rec.entries)
    assert [replay.complete(r).text for r in reqs] == originals


def test_replay_from_file(tmp_path):
    path = tmp_path / "t.jsonl"
    rec = TranscriptRecorder(EchoBackend(), path=str(path))
    reqs = _requests(2)
    for r in reqs:
        rec.complete(r)
    replay = ReplayBackend.from_file(str(path))
    for r in reqs:
        replay.complete(r)


def test_replay_rejects_a_drifted_request():
    rec = TranscriptRecorder(EchoBackend())
    rec.complete(_requests(1)[0])
    replay = ReplayBackend(rec.entries)
    drifted = prompts.render("summarize_rephrase", {"headline": "DIFFERENT"})
    with pytest.raises(BackendError) as exc:
        replay.complete(drifted)
    assert exc.value.kind == "protocol"
    assert "entry 0" in str(exc.value)


def test_replay_exhaustion():
    rec = TranscriptRecorder(EchoBackend())
    req = _requests(1)[0]
    rec.complete(req)
    replay = ReplayBackend(rec.entries)
    replay.complete(req)
    with pytest.raises(BackendError) as exc:
        replay.complete(req)
    assert exc.value.kind == "exhausted"


# ---------------------------------------------------------------------------
# Code-block extraction
# ---------------------------------------------------------------------------


def test_extract_code_block_takes_the_last_fence():
    text = "first try\n```rdsl\nx + 1.0\n```\nbetter:\n```rdsl\nx + 2.0\n```\n"
    assert extract_code_block(text) == "x + 2.0"


def test_extract_code_block_errors():
    with pytest.raises(ValueError, match="no fenced"):
        extract_code_block("no blocks here")
    with pytest.raises(ValueError, match="unterminated"):
        extract_code_block("```rdsl\nx + 1.0")
    with pytest.raises(ValueError, match="no fenced json"):
        extract_code_block("```rdsl\nx\n```", label="json")


def test_extract_component_reports_unresolved_names():
    text = "Here you go:\n```rdsl\nlet t = x + q;\nt * 2.0\n```"
    program, unresolved = extract_component(text, schema=("x", "y"))
    assert unresolved == frozenset({"q"})
    assert rdsl.print_program(program) == "let t = x + q;\nt * 2.0"
    _, clean = extract_component("```rdsl\nx + y\n```", schema=("x", "y"))
    assert clean == frozenset()


# ---------------------------------------------------------------------------
# Prompt templates
# ---------------------------------------------------------------------------

FULL_CONTEXT = {
    "env_block": "arena 100x100",
    "requirements_block": "- no_collision (safety): metric total_collisions <= 0.0",
    "schema_block": "x, y, z",
    "req_id": "no_collision",
    "req_text": "vehicles must never collide",
    "metric": "total_collisions",
    "comparator": "<=",
    "threshold": 0.0,
    "component_source": "-(x < 8.0)",
    "verdict": "NO",
    "reason": "collision events increase this component's value",
    "tail_block": "{}",
    "verdicts_block": "energy NO",
    "weights_block": "{}",
    "magnitudes_block": '{"w_col": {"mean_abs": 2.0}}',
    "target_scale": 1.0,
    "round": 1,
    "budget_left": 9,
    "groups_json": "{}",
    "n_slots": 5,
    "suggestions": "slot 1: base g1, KEEP",
    "headline": "group g1 satisfies every requirement",
}


def test_render_is_pure_and_complete():
    assert len(prompts.TEMPLATE_IDS) == 8
    for tid in prompts.TEMPLATE_IDS:
        a = prompts.render(tid, FULL_CONTEXT)
        b = prompts.render(tid, FULL_CONTEXT)
        assert a == b  # same inputs, same request
        assert a.template_id == tid
        roles = [r for r, _ in a.messages]
        assert roles == ["system", "user"]
        body = a.text()
        assert "$" not in body  # every placeholder substituted
        assert body.strip()


def test_render_unknown_template():
    with pytest.raises(prompts.PromptError, match="unknown template"):
        prompts.render("nonexistent", {})


def test_render_missing_key_names_it():
    ctx = dict(FULL_CONTEXT)
    del ctx["req_id"]
    with pytest.raises(prompts.PromptError, match="'req_id'"):
        prompts.render("component_gen", ctx)


def test_render_temperature_override():
    default = prompts.render("critic", FULL_CONTEXT)
    hot = prompts.render("critic", FULL_CONTEXT, temperature=0.9)
    assert hot.temperature == 0.9
    assert default.temperature != 0.9


def _summary_for(gid: str, weights: dict, energy: float = 150.0):
    reqs = {
        "energy": make_requirement("energy", metric="total_energy", comparator="<=", threshold=100.0),
    }
    log = make_log([make_metrics(energy=energy) for _ in range(5)], weights=weights)
    return summarize(log, weights, reqs, gid)


def test_groups_block_round_trips_through_the_prompt():
    groups = {
        "g1": {"w_service": 1.0, "w_ec": 2.0},
        "g10": {"w_service": 3.0, "w_ec": 1.0},
        "g2": {"w_service": 2.0, "w_ec": 2.0},
    }
    summaries = {gid: _summary_for(gid, w) for gid, w in groups.items()}
    block = prompts.build_groups_block(groups, summaries)
    payload = json.loads(block)
    assert set(payload) == {"g1", "g2", "g10"}
    assert payload["g1"]["weights"] == groups["g1"]
    assert payload["g1"]["verdicts"] == {"energy": "NO"}
    assert payload["g1"]["dominant"] in ("w_service", "w_ec")
    req = prompts.render("search_suggest", {
        "round": 2, "budget_left": 8, "requirements_block": "reqs",
        "groups_json": block, "n_slots": 3,
    })
    assert prompts.parse_groups_block(req.text()) == payload


def test_parse_suggestions_block():
    req = prompts.render("search_emit", {
        "groups_json": "{}", "suggestions": "  slot 1: base g1, KEEP  ", "n_slots": 1,
    })
    assert prompts.parse_suggestions_block(req.text()) == "slot 1: base g1, KEEP"
    with pytest.raises(prompts.PromptError, match="GROUPS"):
        prompts.parse_groups_block("no markers")
    with pytest.raises(prompts.PromptError, match="SUGGESTIONS"):
        prompts.parse_suggestions_block("no markers")


# ---------------------------------------------------------------------------
# Suggestion-line grammar
# ---------------------------------------------------------------------------


def test_parse_suggestion_lines_grammar():
    text = """Here is a rationale sentence that should be ignored.
slot 2: base g3, SCALE w_ec x0.2, SCALE w_service x5
slot 1: base g1, KEEP
slot 3: base g2, CROSSOVER g4 g5
slot 4: base g1, FINETUNE w_col x1.1
this line is noise
slot 9: base g1, TELEPORT somewhere
"""
    parsed = scripted.parse_suggestion_lines(text)
    assert [d["slot"] for d in parsed] == [1, 2, 3, 4]  # sorted; bad line dropped
    assert parsed[0] == {"slot": 1, "base": "g1", "ops": {}, "crossover": []}
    assert parsed[1]["ops"] == {
        "w_ec": {"op": "SCALE", "factor": 0.2},
        "w_service": {"op": "SCALE", "factor": 5.0},
    }
    assert parsed[2]["crossover"] == ["g4", "g5"]
    assert parsed[3]["ops"] == {"w_col": {"op": "FINETUNE", "factor": 1.1}}


# ---------------------------------------------------------------------------
# Scripted search steering: the case table
# ---------------------------------------------------------------------------

STD_WEIGHTS = {"w_col": 1.0, "w_border": 1.0, "w_service": 1.0, "w_ec": 1.0}


def _group_entry(weights, verdicts, margins=None, dominance=None, dominant=""):
    return {
        "weights": dict(weights),
        "verdicts": dict(verdicts),
        "margins": dict(margins or {rid: (1.0 if v == "YES" else -1.0) for rid, v in verdicts.items()}),
        "dominance": dict(dominance or {}),
        "dominant": dominant,
    }


ALL_YES = {"no_collision": "YES", "no_border": "YES", "overflow": "YES", "energy": "YES"}


def test_propose_energy_stall_case():
    verdicts = dict(ALL_YES, overflow="NO")
    groups = {
        "g1": _group_entry(dict(STD_WEIGHTS, w_ec=100.0), verdicts,
                           dominance={"w_ec": 0.9, "w_col": 0.1}, dominant="w_ec"),
        "g2": _group_entry(dict(STD_WEIGHTS, w_service=5.0, w_ec=100.0), verdicts,
                           dominance={"w_ec": 0.8, "w_col": 0.2}, dominant="w_ec"),
    }
    rationale, lines = scripted.propose_slots(groups, 5)
    assert "energy term dominates" in rationale
    assert lines[0] == "slot 1: base g2, SCALE w_ec x0.04"  # g2 has the best ratio
    assert lines[4] == "slot 5: base g2, KEEP"
    assert any("SCALE w_service x5" in ln for ln in lines)


def test_propose_service_shortfall_case():
    verdicts = dict(ALL_YES, overflow="NO")
    groups = {"g1": _group_entry(STD_WEIGHTS, verdicts, dominance={"w_col": 1.0}, dominant="w_col")}
    rationale, lines = scripted.propose_slots(groups, 5)
    assert "service" in rationale
    assert lines[0] == "slot 1: base g1, SCALE w_service x5"


def test_propose_safety_case():
    verdicts = dict(ALL_YES, no_collision="NO", no_border="NO")
    groups = {"g1": _group_entry(STD_WEIGHTS, verdicts)}
    rationale, lines = scripted.propose_slots(groups, 5)
    assert "safety" in rationale
    assert lines[0] == "slot 1: base g1, SCALE w_col x5, SCALE w_border x5"


def test_propose_energy_overrun_case():
    verdicts = dict(ALL_YES, energy="NO")
    groups = {"g1": _group_entry(STD_WEIGHTS, verdicts)}
    rationale, lines = scripted.propose_slots(groups, 5)
    assert "energy weight" in rationale
    assert lines[0] == "slot 1: base g1, SCALE w_ec x5"


def test_propose_fallback_finetunes():
    groups = {"g1": _group_entry({"a": 1.0, "b": 2.0}, {"custom": "NO"})}
    rationale, lines = scripted.propose_slots(groups, 5)
    assert "fine-tun" in rationale
    assert lines[0] == "slot 1: base g1, FINETUNE a x1.1"
    assert lines[1] == "slot 2: base g1, FINETUNE b x0.9"
    assert lines[4] == "slot 5: base g1, KEEP"


def test_propose_pads_and_trims_to_slot_count():
    verdicts = dict(ALL_YES, energy="NO")
    groups = {"g1": _group_entry(STD_WEIGHTS, verdicts)}
    _, seven = scripted.propose_slots(groups, 7)
    assert len(seven) == 7
    assert [int(ln.split()[1].rstrip(":")) for ln in seven] == [1, 2, 3, 4, 5, 6, 7]
    assert seven[5].endswith("KEEP") and seven[6].endswith("KEEP")
    _, three = scripted.propose_slots(groups, 3)
    assert len(three) == 3
    assert [int(ln.split()[1].rstrip(":")) for ln in three] == [1, 2, 3]


def test_every_proposal_survives_validation():
    """Any scripted suggestion, emitted and validated, must parse cleanly."""
    cases = [
        {"g1": _group_entry(dict(STD_WEIGHTS, w_ec=50.0), dict(ALL_YES, overflow="NO"),
                            dominance={"w_ec": 0.9}, dominant="w_ec")},
        {"g1": _group_entry(STD_WEIGHTS, dict(ALL_YES, overflow="NO"))},
        {"g1": _group_entry(STD_WEIGHTS, dict(ALL_YES, no_collision="NO"))},
        {"g1": _group_entry(STD_WEIGHTS, dict(ALL_YES, energy="NO"))},
        {"g1": _group_entry(STD_WEIGHTS, ALL_YES)},
        {"g1": _group_entry({"q": 1.0}, {"r": "NO"})},
    ]
    for groups in cases:
        _, lines = scripted.propose_slots(groups, 5)
        directives = scripted.parse_suggestion_lines("\n".join(lines))
        names = set()
        for g in groups.values():
            names |= set(g["weights"])
        validated = validate_directives({"directives": directives}, sorted(names), sorted(groups), k=5)
        assert len(validated) == 5


# ---------------------------------------------------------------------------
# The default rule table, end to end
# ---------------------------------------------------------------------------


def _schema_block():
    return ", ".join(("x", "y"))


def test_component_rule_returns_reference_source():
    backend = scripted.scripted_backend()
    req = prompts.render("component_gen", {
        "req_id": "no_collision", "req_text": "never collide", "metric": "total_collisions",
        "comparator": "<=", "threshold": 0.0, "schema_block": _schema_block(),
    })
    reply = backend.complete(req).text
    source = extract_code_block(reply)
    cid = rewards.COMPONENT_FOR_REQUIREMENT["no_collision"]
    assert source == rdsl.print_program(rewards.reference_components()[cid].program)


def test_component_rule_override_wins():
    backend = scripted.scripted_backend({"no_collision": "x + y"})
    req = prompts.render("component_gen", {
        "req_id": "no_collision", "req_text": "never collide", "metric": "total_collisions",
        "comparator": "<=", "threshold": 0.0, "schema_block": _schema_block(),
    })
    assert extract_code_block(backend.complete(req).text) == "x + y"


def test_component_rule_rejects_unknown_requirement():
    backend = scripted.scripted_backend()
    req = prompts.render("component_gen", {
        "req_id": "fly_to_the_moon", "req_text": "?", "metric": "total_collisions",
        "comparator": "<=", "threshold": 0.0, "schema_block": _schema_block(),
    })
    with pytest.raises(BackendError):
        backend.complete(req)


def test_critic_rule_diagnoses_sign_error_and_repairs():
    backend = scripted.scripted_backend()
    req = prompts.render("critic", {
        "req_id": "no_collision",
        "component_source": "(x < 8.0)",
        "verdict": "NO",
        "reason": "collision events increase this component's value",
        "tail_block": "{}",
        "schema_block": _schema_block(),
    })
    reply = backend.complete(req).text
    assert "negative sign" in reply
    source = extract_code_block(reply)
    cid = rewards.COMPONENT_FOR_REQUIREMENT["no_collision"]
    assert source == rdsl.print_program(rewards.reference_components()[cid].program)


def test_critic_rule_generic_reason():
    backend = scripted.scripted_backend()
    req = prompts.render("critic", {
        "req_id": "energy",
        "component_source": "x",
        "verdict": "NO",
        "reason": "margin -3.0 on tail metric",
        "tail_block": "{}",
        "schema_block": _schema_block(),
    })
    reply = backend.complete(req).text
    assert "does not reward the behaviour" in reply
    extract_code_block(reply)  # still supplies a corrected component


def test_suggest_and_emit_rules_compose():
    backend = scripted.scripted_backend()
    weights = {
        "g1": dict(STD_WEIGHTS),
        "g2": dict(STD_WEIGHTS, w_service=4.0),
    }
    reqs = {"energy": make_requirement("energy", metric="total_energy", comparator="<=", threshold=100.0)}
    summaries = {
        gid: summarize(make_log([make_metrics(energy=150.0)] * 4, weights=w), w, reqs, gid)
        for gid, w in weights.items()
    }
    block = prompts.build_groups_block(weights, summaries)
    suggest = backend.complete(prompts.render("search_suggest", {
        "round": 1, "budget_left": 9, "requirements_block": "reqs",
        "groups_json": block, "n_slots": 2,
    }))
    emit = backend.complete(prompts.render("search_emit", {
        "groups_json": block, "suggestions": suggest.text, "n_slots": 2,
    }))
    directives = validate_directives(emit.text, sorted(STD_WEIGHTS), ["g1", "g2"], k=2)
    assert len(directives) == 2


def test_weight_init_rule_inverts_magnitudes():
    backend = scripted.scripted_backend()
    stats = {"w_col": {"mean_abs": 2.0}, "w_ec": {"mean_abs": 0.5}}
    req = prompts.render("weight_init", {
        "magnitudes_block": json.dumps(stats), "target_scale": 3.0,
    })
    weights = json.loads(backend.complete(req).text)
    assert weights["w_col"] == pytest.approx(3.0 / (2.0 + 1e-9))
    assert weights["w_ec"] == pytest.approx(3.0 / (0.5 + 1e-9))


def test_advise_rule_names_the_failing_axis():
    backend = scripted.scripted_backend()
    req = prompts.render("meta_advise", {
        "requirements_block": "- overflow: overflow_per_node <= 2.0",
        "verdicts_block": "overflow NO",
        "weights_block": "{}",
        "tail_block": "{}",
    })
    reply = backend.complete(req).text
    assert "overflow allowance" in reply or "fill rates" in reply


def test_rephrase_rule_echoes_the_headline():
    backend = scripted.scripted_backend()
    req = prompts.render("summarize_rephrase", {"headline": "group g3 fails energy by 12.5"})
    assert backend.complete(req).text == "group g3 fails energy by 12.5"
