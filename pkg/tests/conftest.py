"""Shared fixtures: fixture paths, seeded rngs and canned model replies."""

import json
from pathlib import Path

import numpy as np
import pytest

from neggrounding.pipeline.clients import MockClient
from neggrounding.textparse import default_lexicon

FIXTURES = Path(__file__).parent / "fixtures"

CANNED_REPLY = {
    "attributes": {
        "present": ["hat", "blue shirt", "smiling"],
        "absent": ["glasses", "umbrella", "backpack"],
    },
    "captions": {
        "negative": "A man without a hat.",
        "negative_attribute": "hat",
        "positive": "A man not wearing glasses.",
        "positive_attribute": "glasses",
    },
    "verification": {"negative": "hat is visible", "positive": "no glasses visible"},
}


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def lexicon():
    return default_lexicon()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def canned_reply() -> dict:
    return json.loads(json.dumps(CANNED_REPLY))


@pytest.fixture
def mock_client():
    """Factory fixture: MockClient(kind=[reply for attempt 0, attempt 1, ...])."""

    def _factory(**responses_by_kind) -> MockClient:
        client = MockClient()
        for kind, responses in responses_by_kind.items():
            if isinstance(responses, (str, dict)):
                responses = [responses]
            client.add_rule(kind, "", *responses)
        return client

    return _factory
