import logging

import pytest

from speech_agent_framework import Segment, SpeechAgentFramework, init_logging
from speech_model import ConfigError, ModelConfig


def test_init_logging_installs_one_handler():
    init_logging()
    init_logging(logging.DEBUG)
    handlers = [h for h in logging.getLogger().handlers if getattr(h, "_speechmind_handler", False)]
    assert len(handlers) == 1
    assert handlers[0].level == logging.DEBUG
    init_logging()


def test_segment_shift_clips_to_limit():
    segment = Segment(1.0, 4.0, " hi", tokens=[5])
    shifted = segment.shifted(28.0, limit=30.0)
    assert (shifted.start, shifted.end) == (29.0, 30.0)
    assert shifted.tokens == [5] and shifted.tokens is not segment.tokens
    assert Segment(1.0, None, "x", partial=True).shifted(2.0).end is None


def test_from_files_builds_agents_lazily(tmp_path, vocab):
    path = str(tmp_path / "narrow.env")
    ModelConfig(name="narrow", n_layers=2, width=64, heads=4, vocab_size=vocab.n_vocab).save(path)
    framework = SpeechAgentFramework.from_files(config_path=path, seed=1)
    assert framework.model.n_vocab == vocab.n_vocab
    assert framework.transcription_agent is None
    framework.init_agents_as_needed()
    agent = framework.transcription_agent
    framework.init_agents_as_needed()
    assert framework.transcription_agent is agent
    assert framework.planning_agent.evaluation_agent is framework.evaluation_agent


def test_from_files_rejects_mismatched_vocabulary(tmp_path):
    path = str(tmp_path / "bad.env")
    ModelConfig(name="bad", n_layers=1, width=64, heads=4, vocab_size=10).save(path)
    with pytest.raises(ConfigError):
        SpeechAgentFramework.from_files(config_path=path)
