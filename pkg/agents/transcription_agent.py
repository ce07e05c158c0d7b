from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

from tqdm import tqdm

from agents.agent import Agent
from speech_agent_framework import Segment, Transcript
from speech_audio import (
    AudioBuffer, EmptyAudioError, FRAMES_PER_SECOND, N_FRAMES, SAMPLE_RATE,
    load_wav, log_mel_spectrogram, resample,
)
from speech_decoding import DecodeOptions, DecodeResult, decode_with_fallback
from speech_vocab import ProtocolViolationError, TaskSpec, Vocabulary

NO_SPEECH_THRESHOLD = 0.6
LOGPROB_THRESHOLD = -1.0
# Previous text is only trusted when it came from a low-temperature decode
PROMPT_TEMPERATURE_LIMIT = 0.5


@dataclass
class TranscribeOptions:
    """Long-form settings; each heuristic can be switched off for ablations"""
    language: Optional[str] = None
    task: str = "transcribe"
    timestamps: bool = True
    decode: DecodeOptions = field(default_factory=DecodeOptions)
    vad_enabled: bool = True
    no_speech_threshold: float = NO_SPEECH_THRESHOLD
    logprob_threshold: float = LOGPROB_THRESHOLD
    condition_on_previous_text: bool = True
    redetect_language: bool = False
    progress: bool = False


class TranscriptionAgent(Agent):
    """
    Transcribes audio of any length by decoding consecutive 30-second windows.
    The window advances to the last complete timestamp, so speech cut at a
    window edge is decoded again from its start in the next window.
    """

    name = "Transcription Agent"
    color = Agent.GREEN

    def __init__(self, model, vocab: Vocabulary, decode_fn: Optional[Callable[..., DecodeResult]] = None):
        """
        Initialize the Transcription Agent

        Args:
            model: SpeechModel (or anything with the same encode/decode methods)
            vocab: Vocabulary matching the model
            decode_fn: Window decoder, decode_with_fallback unless overridden
        """
        self.log("Transcription Agent is initializing")
        self.model = model
        self.vocab = vocab
        self.decode_fn = decode_fn or decode_with_fallback
        self.log("Transcription Agent is ready")

    def detect_language(self, audio: AudioBuffer) -> Dict[str, float]:
        """Language probabilities from the first 30 seconds"""
        audio = resample(audio, SAMPLE_RATE)
        if len(audio) == 0:
            raise EmptyAudioError("cannot detect the language of empty audio")
        states = self.model.encode_audio(log_mel_spectrogram(audio).window(0))
        probs = self.model.detect_language(states, self.vocab.specials)
        best = max(probs, key=probs.get)
        self.log(f"Detected language {best} (p={probs[best]:.2f})")
        return probs

    def transcribe_file(self, path: str, options: Optional[TranscribeOptions] = None) -> Transcript:
        return self.transcribe(load_wav(path), options)

    def _is_silent(self, result: DecodeResult, options: TranscribeOptions) -> bool:
        return (options.vad_enabled
                and result.no_speech_prob > options.no_speech_threshold
                and result.avg_logprob < options.logprob_threshold)

    def _parse(self, result: DecodeResult, window_seconds: float) -> List[Segment]:
        try:
            return self.vocab.parse_transcript(result.tokens, chunk_duration=window_seconds,
                                               timestamps=result.timestamps)
        except ProtocolViolationError as e:
            self.warning(f"Discarding timestamps of a malformed window: {e}")
            text_tokens = [token for token in result.tokens if token < self.vocab.n_text_tokens]
            return [Segment(0.0, window_seconds, self.vocab.decode(text_tokens), tokens=text_tokens, flagged=True)]

    def transcribe(self, audio: AudioBuffer, options: Optional[TranscribeOptions] = None) -> Transcript:
        """
        Transcribe an AudioBuffer of any length.

        Args:
            audio: Input audio; resampled to 16 kHz when needed
            options: Long-form settings

        Returns:
            Transcript with absolute segment times
        """
        options = options or TranscribeOptions()
        audio = resample(audio, SAMPLE_RATE)
        if len(audio) == 0:
            raise EmptyAudioError("cannot transcribe empty audio")

        mel = log_mel_spectrogram(audio)
        duration = audio.duration
        transcript = Transcript(language=options.language, duration=duration)
        language = options.language
        prev_tokens: List[int] = []
        seek = 0

        self.log(f"Transcribing {duration:.2f}s of audio")
        with tqdm(total=mel.n_frames, unit="frame", disable=not options.progress) as progress:
            while seek < mel.n_frames:
                offset = seek / FRAMES_PER_SECOND
                window_frames = min(N_FRAMES, mel.n_frames - seek)
                window_seconds = window_frames / FRAMES_PER_SECOND
                transcript.window_offsets.append(offset)

                states = self.model.encode_audio(mel.window(seek))
                window_language = language
                if window_language is None or options.redetect_language:
                    probs = self.model.detect_language(states, self.vocab.specials)
                    window_language = max(probs, key=probs.get)

                task = TaskSpec(
                    language=window_language,
                    task=options.task,
                    timestamps=options.timestamps,
                    prev_tokens=prev_tokens if options.condition_on_previous_text else [],
                )
                prompt = self.vocab.build_prompt(task, self.model.n_text_ctx)
                result = self.decode_fn(self.model, self.vocab, states, prompt, options.decode)

                if self._is_silent(result, options):
                    self.debug(f"Window at {offset:.2f}s is silent (no_speech={result.no_speech_prob:.2f})")
                    transcript.silent_windows.append(offset)
                    seek += window_frames
                    progress.update(window_frames)
                    continue

                if language is None:
                    language = window_language
                    transcript.language = language

                segments = self._parse(result, window_seconds)
                complete = [segment for segment in segments if not segment.partial]
                partial = next((segment for segment in segments if segment.partial), None)
                if not result.timestamps or any(segment.flagged for segment in segments):
                    advance = window_frames
                elif partial is not None:
                    advance = int(round(partial.start * FRAMES_PER_SECOND))
                elif complete:
                    advance = int(round(complete[-1].end * FRAMES_PER_SECOND))
                else:
                    advance = window_frames

                forced = advance <= 0
                if forced:
                    self.warning(f"No progress in window at {offset:.2f}s, skipping ahead")
                    transcript.forced_advances.append(offset)
                    advance = window_frames

                for segment in complete:
                    if offset + segment.start >= duration:
                        continue
                    placed = segment.shifted(offset, limit=duration)
                    placed.avg_logprob = result.avg_logprob
                    placed.no_speech_prob = result.no_speech_prob
                    placed.temperature = result.temperature
                    placed.compression_ratio = result.compression_ratio
                    placed.flagged = placed.flagged or forced or result.low_quality
                    transcript.segments.append(placed)

                if options.condition_on_previous_text and result.temperature < PROMPT_TEMPERATURE_LIMIT:
                    prev_tokens = [token for segment in complete for token in segment.tokens]
                else:
                    prev_tokens = []

                self.debug(f"Window at {offset:.2f}s: {len(complete)} segment(s), T={result.temperature:.1f}, "
                           f"advance {advance / FRAMES_PER_SECOND:.2f}s")
                seek += advance
                progress.update(min(advance, mel.n_frames - progress.n))

        self.log(f"Transcribed {len(transcript.segments)} segment(s) in {len(transcript.window_offsets)} window(s)")
        return transcript


def transcribe(audio: AudioBuffer, model, vocab: Vocabulary, options: Optional[TranscribeOptions] = None) -> Transcript:
    """One-shot long-form transcription"""
    return TranscriptionAgent(model, vocab).transcribe(audio, options)
