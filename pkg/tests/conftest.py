import json
from importlib import resources
from pathlib import Path

import pytest

from textdissect.agents import ScriptedChat
from textdissect.providers import Providers, RetryPolicy
from textdissect.providers.simulation import IdentityGenerator, LexicalWorldClassifier, LexicalWorldSpec

FIXTURES = Path(__file__).parent / "fixtures"


def builtin_world(name: str) -> LexicalWorldSpec:
    text = resources.files("textdissect").joinpath(f"data/{name}_world.json").read_text("utf-8")
    return LexicalWorldSpec.from_dict(json.loads(text))


def sim_providers(world: LexicalWorldSpec, seed: int = 7, **kw) -> Providers:
    return Providers(
        generator=IdentityGenerator(kw.pop("blocked", ())),
        classifier=LexicalWorldClassifier(world),
        chat=ScriptedChat(world.vocabulary(), seed=seed),
        retry=RetryPolicy(sleep=lambda s: None),
        **kw,
    )


class FixedClassifier:
    """Returns scripted probability vectors for step prompts, in order.

    Single-word texts are the per-unit scoring queries; they get a fixed
    answer and do not advance the script.
    """

    def __init__(self, vectors, unit_vector=None):
        self.vectors = list(vectors)
        self.unit_vector = unit_vector or self.vectors[0]
        self.calls = 0

    def classify(self, sample):
        text = sample.carried_text or sample.source_prompt
        if len(text.split()) == 1:
            return list(self.unit_vector)
        v = self.vectors[min(self.calls, len(self.vectors) - 1)]
        self.calls += 1
        return list(v)


@pytest.fixture
def demo_world():
    return builtin_world("demo")


@pytest.fixture
def waterbirds_world():
    return builtin_world("waterbirds")


@pytest.fixture
def no_sleep_retry():
    return RetryPolicy(sleep=lambda s: None)
