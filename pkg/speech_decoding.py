"""
Autoregressive decoding over a cached decoder: logit rules, greedy and
sampled decoding, beam search and the temperature fallback loop.

Decoders only need a model with new_cache(batch_size), decode_tokens(tokens,
cache, audio_states) -> [batch, n_new, vocab] and n_text_ctx; SpeechModel
provides all three.
"""
import gzip
import logging
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F

from speech_agent_framework import SpeechMindError
from speech_vocab import Vocabulary, N_TIMESTAMPS, TIMESTAMPS_PER_SECOND, MAX_TIMESTAMP

logger = logging.getLogger(__name__)

DEFAULT_TEMPERATURES = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
LOGPROB_THRESHOLD = -1.0
COMPRESSION_RATIO_THRESHOLD = 2.4


class DecodingError(SpeechMindError):
    code = "decoding_error"


@dataclass
class DecodeOptions:
    """Knobs for one decode; defaults match the standard long-form settings"""
    temperature: float = 0.0
    beam_size: int = 5
    max_tokens: Optional[int] = None  # None -> n_text_ctx // 2
    length_penalty: Optional[float] = None  # None ranks beams by raw log-probability
    suppress_blank: bool = True
    timestamp_rules: bool = True
    initial_timestamp_max: Optional[float] = 1.0  # None lifts the first-timestamp bound
    timestamp_dominance: bool = True
    temperatures: Tuple[float, ...] = DEFAULT_TEMPERATURES
    temperature_fallback: bool = True
    logprob_threshold: Optional[float] = LOGPROB_THRESHOLD
    compression_ratio_threshold: Optional[float] = COMPRESSION_RATIO_THRESHOLD
    seed: int = 0

    def validate(self):
        if self.temperature < 0:
            raise DecodingError(f"temperature must be non-negative, got {self.temperature}")
        if self.beam_size < 1:
            raise DecodingError(f"beam size must be at least 1, got {self.beam_size}")
        if self.max_tokens is not None and self.max_tokens < 0:
            raise DecodingError(f"max_tokens must be non-negative, got {self.max_tokens}")
        if self.initial_timestamp_max is not None and not 0 < self.initial_timestamp_max <= MAX_TIMESTAMP:
            raise DecodingError(f"initial timestamp bound must be in (0, {MAX_TIMESTAMP}]")
        if not self.temperatures:
            raise DecodingError("temperature schedule is empty")
        if any(t < 0 for t in self.temperatures):
            raise DecodingError("temperatures must be non-negative")


@dataclass
class DecodeResult:
    tokens: List[int] = field(default_factory=list)
    text: str = ""
    sum_logprob: float = 0.0
    avg_logprob: float = 0.0
    no_speech_prob: float = 0.0
    temperature: float = 0.0
    compression_ratio: float = 0.0
    n_generated: int = 0
    finished: bool = False
    truncated: bool = False
    low_quality: bool = False
    timestamps: bool = True


@dataclass
class Hypothesis:
    """One beam: content tokens, cumulative log-probability and generated count"""
    tokens: List[int]
    logprob: float = 0.0
    length: int = 0
    finished: bool = False


def compression_ratio(text: str) -> float:
    """UTF-8 length over gzip length; 0.0 for empty text"""
    if not text:
        return 0.0
    raw = text.encode("utf-8")
    return len(raw) / len(gzip.compress(raw, mtime=0))


def needs_fallback(result: DecodeResult, options: DecodeOptions) -> bool:
    """A decode is rejected when it is too unlikely or too repetitive"""
    if options.logprob_threshold is not None and result.avg_logprob < options.logprob_threshold:
        return True
    if options.compression_ratio_threshold is not None and result.compression_ratio > options.compression_ratio_threshold:
        return True
    return False


def apply_logit_rules(logits: torch.Tensor, tokens: Sequence[int], vocab: Vocabulary,
                      options: DecodeOptions, timestamps: bool = True) -> torch.Tensor:
    """
    Mask next-token logits so the output stays well formed.

    tokens holds the content sampled so far (prompt excluded). Control tokens
    are never allowed. In timestamp mode a segment opens with a timestamp,
    text only appears inside an open segment, timestamps never go backwards,
    the first one is bounded by initial_timestamp_max, and text is masked
    whenever the total timestamp probability beats every single text token.

    Returns:
        A masked copy; masked entries are -inf
    """
    specials = vocab.specials
    masked = logits.clone()
    masked[specials.non_content_ids] = float("-inf")

    if options.suppress_blank and not tokens:
        masked[vocab.encode(" ") + [specials.eot]] = float("-inf")

    begin, end = specials.timestamp_begin, specials.timestamp_begin + N_TIMESTAMPS
    if not timestamps:
        masked[begin:end] = float("-inf")
        return masked
    if not options.timestamp_rules:
        return masked

    stamps = [token for token in tokens if specials.is_timestamp(token)]
    inside = len(stamps) % 2 == 1
    if not inside:
        masked[:vocab.n_text_tokens] = float("-inf")
    elif not specials.is_timestamp(tokens[-1]):
        # text was emitted, so the segment has to close before the transcript ends
        masked[specials.eot] = float("-inf")

    if stamps:
        masked[begin:stamps[-1]] = float("-inf")

    if not tokens and options.initial_timestamp_max is not None:
        last_allowed = begin + int(round(options.initial_timestamp_max * TIMESTAMPS_PER_SECOND))
        masked[last_allowed + 1:end] = float("-inf")

    if inside and options.timestamp_dominance:
        logprobs = F.log_softmax(masked.double(), dim=-1)
        timestamp_logprob = torch.logsumexp(logprobs[begin:end], dim=-1)
        max_text_logprob = logprobs[:vocab.n_text_tokens].max()
        if timestamp_logprob > max_text_logprob:
            masked[:vocab.n_text_tokens] = float("-inf")
    return masked


def _prepare(model, vocab: Vocabulary, prompt: Sequence[int], options: DecodeOptions):
    options.validate()
    specials = vocab.specials
    prompt = [int(token) for token in prompt]
    if specials.sot not in prompt:
        raise DecodingError("prompt has no <|startoftranscript|> token")

    truncated = False
    limit = model.n_text_ctx - 1
    if len(prompt) > limit:
        prompt = prompt[-limit:]
        truncated = True
        if specials.sot not in prompt:
            raise DecodingError("prompt header does not fit in the text context")

    sot_index = len(prompt) - 1 - prompt[::-1].index(specials.sot)
    timestamps = specials.no_timestamps not in prompt[sot_index:]
    max_tokens = options.max_tokens if options.max_tokens is not None else model.n_text_ctx // 2
    return prompt, sot_index, timestamps, max_tokens, truncated


def _first_pass(model, vocab: Vocabulary, audio_states, prompt: List[int], sot_index: int):
    cache = model.new_cache(1)
    logits = model.decode_tokens(torch.tensor([prompt], dtype=torch.long), cache, audio_states)
    no_speech_prob = float(F.softmax(logits[0, sot_index].double(), dim=-1)[vocab.specials.no_speech])
    return cache, logits[:, -1], no_speech_prob


def _finish(vocab: Vocabulary, tokens: List[int], sum_logprob: float, n_generated: int, **kwargs) -> DecodeResult:
    text = vocab.decode(tokens, skip_special=True)
    return DecodeResult(
        tokens=tokens,
        text=text,
        sum_logprob=sum_logprob,
        avg_logprob=sum_logprob / n_generated if n_generated else 0.0,
        compression_ratio=compression_ratio(text),
        n_generated=n_generated,
        **kwargs,
    )


def greedy_decode(model, vocab: Vocabulary, audio_states: torch.Tensor, prompt: Sequence[int],
                  options: DecodeOptions) -> DecodeResult:
    """
    Argmax decoding at temperature 0 (ties go to the lowest id), otherwise
    sampling from softmax(logits / T) with a generator seeded by options.seed.
    """
    prompt, sot_index, timestamps, max_tokens, truncated = _prepare(model, vocab, prompt, options)
    eot = vocab.specials.eot
    cache, logits, no_speech_prob = _first_pass(model, vocab, audio_states, prompt, sot_index)
    logits = logits[0]

    generator = torch.Generator().manual_seed(options.seed) if options.temperature > 0 else None
    tokens: List[int] = []
    sum_logprob, n_generated, finished = 0.0, 0, False
    while n_generated < max_tokens:
        masked = apply_logit_rules(logits, tokens, vocab, options, timestamps)
        if not torch.isfinite(masked).any():
            raise DecodingError("every token is masked")
        logprobs = F.log_softmax(masked.double(), dim=-1)
        if generator is None:
            token = int(torch.argmax(logprobs))
        else:
            probs = F.softmax(masked.double() / options.temperature, dim=-1)
            token = int(torch.multinomial(probs, 1, generator=generator))

        sum_logprob += float(logprobs[token])
        n_generated += 1
        if token == eot:
            finished = True
            break
        tokens.append(token)
        if n_generated >= max_tokens:
            break
        if cache.length >= model.n_text_ctx:
            truncated = True
            break
        logits = model.decode_tokens(torch.tensor([[token]], dtype=torch.long), cache, audio_states)[0, -1]

    return _finish(vocab, tokens, sum_logprob, n_generated, no_speech_prob=no_speech_prob,
                   temperature=options.temperature, finished=finished, truncated=truncated,
                   timestamps=timestamps)


def _rank(hypothesis: Hypothesis, length_penalty: Optional[float]) -> float:
    if length_penalty is None or hypothesis.length == 0:
        return hypothesis.logprob
    return hypothesis.logprob / (((5 + hypothesis.length) / 6) ** length_penalty)


def beam_decode(model, vocab: Vocabulary, audio_states: torch.Tensor, prompt: Sequence[int],
                options: DecodeOptions) -> DecodeResult:
    """
    Beam search at temperature 0.

    Each step keeps the beam_size best non-final extensions by cumulative
    log-probability; extensions ending in <|endoftext|> move to the finished
    pool. Search stops once beam_size hypotheses finished or max_tokens is
    reached, and the best finished hypothesis wins (open ones compete when
    fewer than beam_size finished).
    """
    prompt, sot_index, timestamps, max_tokens, truncated = _prepare(model, vocab, prompt, options)
    eot = vocab.specials.eot
    beam_size = options.beam_size
    cache, logits, no_speech_prob = _first_pass(model, vocab, audio_states, prompt, sot_index)

    live = [Hypothesis(tokens=[])]
    finished: List[Hypothesis] = []
    for step in range(max_tokens):
        candidates = []
        for row, hypothesis in enumerate(live):
            masked = apply_logit_rules(logits[row], hypothesis.tokens, vocab, options, timestamps)
            logprobs = F.log_softmax(masked.double(), dim=-1)
            values, indices = torch.sort(logprobs, descending=True, stable=True)
            for value, token in zip(values[:beam_size + 1].tolist(), indices[:beam_size + 1].tolist()):
                if value == float("-inf"):
                    break
                candidates.append((hypothesis.logprob + value, token, row))
        if not candidates:
            raise DecodingError("every token is masked")
        candidates.sort(key=lambda candidate: (-candidate[0], candidate[1], candidate[2]))

        next_live, parents = [], []
        for score, token, row in candidates:
            parent = live[row]
            if token == eot:
                finished.append(Hypothesis(list(parent.tokens), score, parent.length + 1, finished=True))
            else:
                next_live.append(Hypothesis(parent.tokens + [token], score, parent.length + 1))
                parents.append(row)
            if len(next_live) == beam_size:
                break
        live = next_live

        if len(finished) >= beam_size or not live or step == max_tokens - 1:
            break
        if cache.length >= model.n_text_ctx:
            truncated = True
            break
        cache.reorder(parents)
        new_tokens = torch.tensor([[hypothesis.tokens[-1]] for hypothesis in live], dtype=torch.long)
        logits = model.decode_tokens(new_tokens, cache, audio_states)[:, -1]

    pool = finished if len(finished) >= beam_size else finished + live
    best = max(pool, key=lambda hypothesis: _rank(hypothesis, options.length_penalty))
    logger.debug("Beam search kept %d finished / %d open hypotheses", len(finished), len(live))
    return _finish(vocab, best.tokens, best.logprob, best.length, no_speech_prob=no_speech_prob,
                   temperature=0.0, finished=best.finished, truncated=truncated, timestamps=timestamps)


def decode_with_fallback(model, vocab: Vocabulary, audio_states: torch.Tensor, prompt: Sequence[int],
                         options: DecodeOptions) -> DecodeResult:
    """
    Try each temperature in turn (beam search at 0, sampling above) and keep
    the first result that is likely enough and not too repetitive. When every
    attempt fails the last one is returned with low_quality set.
    """
    temperatures = options.temperatures if options.temperature_fallback else options.temperatures[:1]
    result = None
    for attempt, temperature in enumerate(temperatures):
        attempt_options = replace(options, temperature=temperature, seed=options.seed + attempt)
        if temperature == 0 and options.beam_size > 1:
            result = beam_decode(model, vocab, audio_states, prompt, attempt_options)
        else:
            result = greedy_decode(model, vocab, audio_states, prompt, attempt_options)
        if not needs_fallback(result, options):
            return result
        logger.debug("Rejected decode at T=%.1f (avg_logprob %.3f, compression %.2f)",
                     temperature, result.avg_logprob, result.compression_ratio)

    result.low_quality = True
    return result
