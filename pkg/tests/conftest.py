import os
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pytest
import torch

from speech_audio import AudioBuffer, SAMPLE_RATE, save_wav
from speech_decoding import DecodeResult
from speech_model import ModelConfig, SpeechModel, random_weights
from speech_vocab import Vocabulary


@pytest.fixture(scope="session")
def vocab() -> Vocabulary:
    return Vocabulary.default()


@pytest.fixture(scope="session")
def tiny_config(vocab) -> ModelConfig:
    return ModelConfig.preset("tiny", vocab_size=vocab.n_vocab)


@pytest.fixture(scope="session")
def tiny_model(tiny_config) -> SpeechModel:
    return SpeechModel.from_weights(tiny_config, random_weights(tiny_config, seed=0))


def narrow_config(vocab_size: int, n_text_ctx: int = 448) -> ModelConfig:
    """Two-layer, 64-wide geometry for fast functional tests"""
    return ModelConfig(name="narrow", n_layers=2, width=64, heads=4, vocab_size=vocab_size, n_text_ctx=n_text_ctx)


@pytest.fixture(scope="session")
def narrow_model(vocab) -> SpeechModel:
    config = narrow_config(vocab.n_vocab)
    return SpeechModel.from_weights(config, random_weights(config, seed=0))


def tone(seconds: float, frequency: float = 440.0, sample_rate: int = SAMPLE_RATE,
         amplitude: float = 0.5) -> AudioBuffer:
    t = np.arange(int(round(seconds * sample_rate))) / sample_rate
    return AudioBuffer((amplitude * np.sin(2 * np.pi * frequency * t)).astype(np.float32), sample_rate)


@pytest.fixture
def write_tone(tmp_path) -> Callable[..., str]:
    """Write a sine tone WAV under tmp_path and return its path"""

    def write(name: str = "tone.wav", seconds: float = 1.0, frequency: float = 440.0,
              sample_rate: int = SAMPLE_RATE, subtype: str = "PCM_16") -> str:
        path = os.path.join(str(tmp_path), name)
        save_wav(path, tone(seconds, frequency, sample_rate), subtype)
        return path

    return write


class ScriptedModel:
    """Stands in for SpeechModel when a scripted decode function drives transcription"""

    n_text_ctx = 448

    def __init__(self, languages: Optional[Dict[str, float]] = None):
        self.languages = languages or {"en": 0.9, "de": 0.1}
        self.encoded = 0

    def encode_audio(self, mel):
        self.encoded += 1
        return torch.zeros(1, 1)

    def detect_language(self, audio_states, specials):
        return dict(self.languages)


class ScriptedDecoder:
    """
    Returns one scripted DecodeResult per call (the last one repeats) and
    records every prompt it was given.
    """

    def __init__(self, results: Sequence[DecodeResult]):
        self.results = list(results)
        self.prompts: List[List[int]] = []

    def __call__(self, model, vocab, audio_states, prompt, options) -> DecodeResult:
        self.prompts.append(list(prompt))
        return self.results[min(len(self.prompts) - 1, len(self.results) - 1)]


def scripted_result(vocab: Vocabulary, pieces: Sequence, eot: bool = True, avg_logprob: float = -0.2,
                    no_speech_prob: float = 0.1, temperature: float = 0.0) -> DecodeResult:
    """
    Build a DecodeResult from a mix of floats (timestamps in seconds) and
    strings (text), e.g. [0.0, "a", 5.0].
    """
    tokens: List[int] = []
    for piece in pieces:
        if isinstance(piece, str):
            tokens.extend(vocab.encode(piece))
        else:
            tokens.append(vocab.timestamp_to_token(piece))
    if eot:
        tokens.append(vocab.specials.eot)
    content = [token for token in tokens if token < vocab.n_text_tokens]
    return DecodeResult(tokens=tokens, text=vocab.decode(content), avg_logprob=avg_logprob,
                        no_speech_prob=no_speech_prob, temperature=temperature, timestamps=True,
                        finished=eot, compression_ratio=1.0)


class ScriptCache:
    """Token history per batch row, reorderable like DecodeCache"""

    def __init__(self, batch_size: int = 1):
        self.rows: List[List[int]] = [[] for _ in range(batch_size)]
        self.length = 0

    def reorder(self, indices: Sequence[int]):
        self.rows = [list(self.rows[i]) for i in indices]


class FunctionModel:
    """
    Decoder whose next-token logits are a function of the token history,
    for decoding tests that need exact control over the distribution.
    """

    def __init__(self, logit_fn: Callable[[List[int]], torch.Tensor], n_text_ctx: int = 448):
        self.logit_fn = logit_fn
        self.n_text_ctx = n_text_ctx

    def new_cache(self, batch_size: int = 1) -> ScriptCache:
        return ScriptCache(batch_size)

    def decode_tokens(self, tokens, cache, audio_states) -> torch.Tensor:
        tokens = torch.as_tensor(tokens, dtype=torch.long)
        if tokens.dim() == 1:
            tokens = tokens[None]
        cache = cache or ScriptCache(tokens.shape[0])
        out = []
        for row, row_tokens in enumerate(tokens.tolist()):
            logits = []
            for token in row_tokens:
                cache.rows[row].append(token)
                logits.append(self.logit_fn(list(cache.rows[row])))
            out.append(torch.stack(logits))
        cache.length += tokens.shape[1]
        return torch.stack(out)
