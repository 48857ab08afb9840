import json
import logging
import os
import random

import numpy as np
import pytest
from click.testing import CliRunner

from capfix.corpus import Caption, build_vocab, load_captions
from capfix.neural import ModelDims, init_parameters

REPO_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
SAMPLE_CAPTIONS = os.path.join(REPO_ROOT, "data", "sample_captions.jsonl")
DESK_CAPTIONS = os.path.join(REPO_ROOT, "data", "desk_captions.jsonl")


@pytest.fixture
def runner():
    """Click test runner for the capfix command group."""
    return CliRunner()


@pytest.fixture(autouse=True)
def restore_root_handlers():
    """The CLI reconfigures the root logger; put pytest's handlers back afterwards."""
    root = logging.getLogger()
    handlers, level = root.handlers[:], root.level
    yield
    root.handlers[:] = handlers
    root.setLevel(level)


@pytest.fixture
def sample_captions():
    return load_captions(SAMPLE_CAPTIONS)


@pytest.fixture
def caption():
    return Caption.from_text("c1", "a dog barks loudly")


@pytest.fixture
def rng():
    return random.Random(0)


@pytest.fixture
def tiny_dims():
    return ModelDims(vocab_size=7, embed_dim=3, hidden_dim=2)


@pytest.fixture
def tiny_params(tiny_dims):
    return init_parameters(tiny_dims, np.random.default_rng(0))


@pytest.fixture
def tiny_vocab():
    vocab = build_vocab([("a", "dog", "barks", "loudly", "cat")])
    assert len(vocab) == 7
    return vocab


def last_json(output):
    """The JSON document a command printed last; log lines never start with '{'."""
    lines = [line for line in output.splitlines() if line.startswith("{")]
    assert lines, output
    return json.loads(lines[-1])


@pytest.fixture
def write_jsonl(tmp_path):
    def _write(name, records):
        path = tmp_path / name
        path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
        return str(path)
    return _write
