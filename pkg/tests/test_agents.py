import logging

import pytest
from hypothesis import given
from hypothesis import strategies as st

from textdissect.agents import (
    AgentRequest,
    AgentRole,
    AgentTemplates,
    ScriptedChat,
    apply_critique,
    render_messages,
    run_feedback,
    run_updater,
    scripted_agent_step,
    truncate_words,
)
from textdissect.context import GlobalContext, LexicalUnit
from textdissect.errors import ConfigError, ProtocolError, TransportError
from textdissect.providers import RetryPolicy
from textdissect.signal import IntensityState, SignalTables, TrendState, compose_signal

TABLES = SignalTables.load()
TEMPLATES = AgentTemplates.load()


def sig(trend, intensity):
    return compose_signal(TrendState(trend), IntensityState(intensity), TABLES)


class Echo:
    def __init__(self, *answers):
        self.answers = list(answers)
        self.seen = []

    def complete(self, messages, request=None):
        self.seen.append(messages)
        a = self.answers.pop(0) if len(self.answers) > 1 else self.answers[0]
        if isinstance(a, Exception):
            raise a
        return a


def feedback_request(**kw):
    s = sig("up", "micro")
    return AgentRequest(AgentRole.FEEDBACK, "a dog sled", semantic_signal=s.text, signal=s, **kw)


def test_feedback_passes_critique_through():
    chat = Echo("add snow")
    crit = run_feedback(feedback_request(), chat, TEMPLATES)
    assert crit.text == "add snow"
    user = chat.seen[0][1]["content"]
    assert TABLES.trend_table["up"] in user and TABLES.intensity_table["micro"] in user


def test_rendering_includes_every_global_unit():
    g = GlobalContext()
    words = ["husky", "snow", "sled", "harness", "winter"]
    g.merge_units(LexicalUnit(w, 0.9 - i / 10) for i, w in enumerate(words))
    msgs = render_messages(feedback_request(global_context=g.render()), TEMPLATES)
    for w in words:
        assert w in msgs[1]["content"]
    assert render_messages(feedback_request(), TEMPLATES) == render_messages(feedback_request(), TEMPLATES)


def test_feedback_retries_transport_failures(caplog):
    sleeps = []
    chat = Echo(TransportError("down"), TransportError("down"), "add snow")
    with caplog.at_level(logging.WARNING):
        crit = run_feedback(feedback_request(), chat, TEMPLATES, RetryPolicy(sleep=sleeps.append))
    assert crit.text == "add snow"
    assert len(chat.seen) == 3
    assert sleeps == [0.5, 1.0]
    assert caplog.text.count("retrying") == 2


def test_retry_gives_up_after_three_attempts():
    chat = Echo(TransportError("down"))
    with pytest.raises(TransportError):
        run_feedback(feedback_request(), chat, TEMPLATES, RetryPolicy(sleep=lambda s: None))
    assert len(chat.seen) == 3


def test_protocol_errors_are_not_retried():
    chat = Echo(ProtocolError("bad"))
    with pytest.raises(ProtocolError):
        run_feedback(feedback_request(), chat, TEMPLATES, RetryPolicy(sleep=lambda s: None))
    assert len(chat.seen) == 1


def test_empty_critique_is_protocol_error():
    with pytest.raises(ProtocolError):
        run_feedback(feedback_request(), Echo("   "), TEMPLATES)


def test_scripted_updater_appends():
    req = AgentRequest(AgentRole.UPDATER, "a dog sled", critique="add snow")
    assert run_updater(req, ScriptedChat(["snow"]), TEMPLATES).prompt == "a dog sled snow"


def test_updater_truncates_long_answers(caplog):
    req = AgentRequest(AgentRole.UPDATER, "a dog", critique="make it long")
    with caplog.at_level(logging.WARNING):
        upd = run_updater(req, Echo("word " * 2000), TEMPLATES, max_chars=1000)
    assert len(upd.prompt) <= 1000 and upd.truncated
    assert upd.prompt.endswith("word")
    assert "truncated" in caplog.text


def test_updater_no_op_flag_and_unquoting():
    req = AgentRequest(AgentRole.UPDATER, "a dog sled", critique="keep")
    assert run_updater(req, Echo("a dog sled"), TEMPLATES).no_op
    assert run_updater(req, Echo('"a dog sled"'), TEMPLATES).no_op
    assert not run_updater(req, Echo("a cat"), TEMPLATES).no_op


def test_requests_validate_role_inputs():
    with pytest.raises(ValueError):
        AgentRequest(AgentRole.FEEDBACK, "a dog")
    with pytest.raises(ValueError):
        AgentRequest(AgentRole.UPDATER, "a dog")


def test_templates_reject_unknown_placeholders(tmp_path):
    for name in ("feedback_system", "updater_system", "feedback_user", "updater_user"):
        (tmp_path / f"{name}.txt").write_text("{current_prompt} {critique} {semantic_signal} "
                                              "{local_context} {global_context}")
    assert AgentTemplates.load(tmp_path)
    (tmp_path / "updater_user.txt").write_text("{current_prompt} {critique} {score}")
    with pytest.raises(ConfigError, match="score"):
        AgentTemplates.load(tmp_path)


def test_scripted_step_examples():
    crit, nxt = scripted_agent_step("a bird", sig("up", "micro"), ["water"], 7)
    assert (crit, nxt) == ("add water", "a bird water")
    crit, nxt = scripted_agent_step("a picture rock", sig("down", "micro"), ["rock", "snow"], 7, last_edit="add rock")
    assert crit == "remove rock" and nxt == "a picture"
    a = scripted_agent_step("a bird", sig("flat", "strong"), ["water", "lake", "reed", "wing"], 7)
    b = scripted_agent_step("a bird", sig("flat", "strong"), ["water", "lake", "reed", "wing"], 7)
    assert a == b


def test_edit_size_follows_intensity():
    vocab = [f"w{i}" for i in range(10)]
    for intensity, n in (("micro", 1), ("moderate", 2), ("strong", 3)):
        crit, _ = scripted_agent_step("a bird", sig("up", intensity), vocab, 1)
        assert len(crit.split()) - 1 == n


def test_apply_critique_grammar():
    assert apply_critique("a dog sled snow", "remove snow") == "a dog sled"
    assert apply_critique("a dog sled", "swap dog with husky") == "a husky sled"
    assert apply_critique("a dog sled", "keep") == "a dog sled"
    assert apply_critique("a dog sled", "gibberish here") == "a dog sled"


@given(st.lists(st.sampled_from(["snow", "sled", "husky", "rock"]), min_size=1, max_size=3, unique=True))
def test_add_then_revert_restores_prompt(words):
    prompt = "a dog"
    added = apply_critique(prompt, "add " + " ".join(words))
    assert apply_critique(added, "remove " + " ".join(words)) == prompt


@given(st.text(alphabet="ab ", max_size=60), st.integers(1, 40))
def test_truncate_words_respects_cap(text, cap):
    out = truncate_words(text, cap)
    assert len(out) <= cap
    assert text.startswith(out)


def test_scripted_chat_tabu_after_revert():
    chat = ScriptedChat(["rock"], seed=1)
    up = sig("up", "micro")
    req = AgentRequest(AgentRole.FEEDBACK, "a dog", semantic_signal=up.text, signal=up)
    assert chat.complete([], req) == "add rock"
    down = sig("down", "micro")
    req = AgentRequest(AgentRole.FEEDBACK, "a dog rock", semantic_signal=down.text, signal=down)
    assert chat.complete([], req) == "remove rock"
    assert "rock" in chat.rejected
    req = AgentRequest(AgentRole.FEEDBACK, "a dog", semantic_signal=up.text, signal=up)
    assert "rock" not in chat.complete([], req)


def test_scripted_chat_needs_structured_request():
    with pytest.raises(ProtocolError):
        ScriptedChat(["rock"]).complete([{"role": "user", "content": "hi"}])
