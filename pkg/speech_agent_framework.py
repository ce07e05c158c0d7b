import sys
import logging
from dataclasses import dataclass, field, asdict
from typing import List, Dict, Any, Optional

# Colors for logging
BG_BLUE = '\033[44m'
WHITE = '\033[37m'
RESET = '\033[0m'

_HANDLER_FLAG = "_speechmind_handler"


def init_logging(level: int = logging.INFO):
    """Initialize logging with custom formatter (safe to call repeatedly)"""
    root = logging.getLogger()
    root.setLevel(level)

    for handler in root.handlers:
        if getattr(handler, _HANDLER_FLAG, False):
            handler.setLevel(level)
            return

    handler = logging.StreamHandler(sys.stdout)
    handler.setLevel(level)
    formatter = logging.Formatter(
        "[%(asctime)s] [SpeechMind] [%(levelname)s] %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S %z",
    )
    handler.setFormatter(formatter)
    setattr(handler, _HANDLER_FLAG, True)
    root.addHandler(handler)


class SpeechMindError(Exception):
    """Root of every error raised by SpeechMind components"""

    code = "speechmind_error"
    # Errors caused by bad user input (files, flags, manifests) rather than bugs
    input_error = False


@dataclass
class Segment:
    """A decoded unit of speech with its timing and decode diagnostics"""
    start: float
    end: Optional[float]
    text: str
    tokens: List[int] = field(default_factory=list)
    avg_logprob: float = 0.0
    no_speech_prob: float = 0.0
    temperature: float = 0.0
    compression_ratio: float = 0.0
    partial: bool = False
    flagged: bool = False

    def shifted(self, offset: float, limit: Optional[float] = None) -> 'Segment':
        """Return a copy moved by offset seconds, with the end clipped to limit"""
        end = None if self.end is None else self.end + offset
        if limit is not None and end is not None:
            end = min(end, limit)
        return Segment(
            start=self.start + offset,
            end=end,
            text=self.text,
            tokens=list(self.tokens),
            avg_logprob=self.avg_logprob,
            no_speech_prob=self.no_speech_prob,
            temperature=self.temperature,
            compression_ratio=self.compression_ratio,
            partial=self.partial,
            flagged=self.flagged,
        )

    def to_dict(self) -> Dict[str, Any]:
        """Convert Segment to dictionary for serialization"""
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'Segment':
        """Create Segment from dictionary"""
        return cls(
            start=data.get("start", 0.0),
            end=data.get("end"),
            text=data.get("text", ""),
            tokens=list(data.get("tokens", [])),
            avg_logprob=data.get("avg_logprob", 0.0),
            no_speech_prob=data.get("no_speech_prob", 0.0),
            temperature=data.get("temperature", 0.0),
            compression_ratio=data.get("compression_ratio", 0.0),
            partial=data.get("partial", False),
            flagged=data.get("flagged", False),
        )


@dataclass
class Transcript:
    """Ordered segments with absolute times for one audio file"""
    segments: List[Segment] = field(default_factory=list)
    language: Optional[str] = None
    duration: float = 0.0
    window_offsets: List[float] = field(default_factory=list)
    silent_windows: List[float] = field(default_factory=list)
    forced_advances: List[float] = field(default_factory=list)

    @property
    def text(self) -> str:
        return " ".join(segment.text.strip() for segment in self.segments if segment.text.strip())

    def to_dict(self) -> Dict[str, Any]:
        """Convert transcript to dictionary for serialization"""
        return {
            "language": self.language,
            "duration": self.duration,
            "text": self.text,
            "segments": [segment.to_dict() for segment in self.segments],
            "window_offsets": list(self.window_offsets),
            "silent_windows": list(self.silent_windows),
            "forced_advances": list(self.forced_advances),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'Transcript':
        """Create Transcript from dictionary"""
        return cls(
            segments=[Segment.from_dict(item) for item in data.get("segments", [])],
            language=data.get("language"),
            duration=data.get("duration", 0.0),
            window_offsets=list(data.get("window_offsets", [])),
            silent_windows=list(data.get("silent_windows", [])),
            forced_advances=list(data.get("forced_advances", [])),
        )


class SpeechAgentFramework:
    """Main framework wiring the model, vocabulary and agents together"""

    def __init__(self, model, vocab, verbose: bool = False):
        init_logging(logging.DEBUG if verbose else logging.INFO)
        self.model = model
        self.vocab = vocab

        # Agents are created on first use
        self.transcription_agent = None
        self.evaluation_agent = None
        self.planning_agent = None

    @classmethod
    def from_files(cls, config_path: Optional[str] = None, weights_path: Optional[str] = None,
                   vocab_path: Optional[str] = None, manifest_path: Optional[str] = None,
                   seed: int = 0, verbose: bool = False, preset: str = "tiny") -> 'SpeechAgentFramework':
        """
        Build a framework from explicit file paths.

        Args:
            config_path: Model config file; the named preset is used when omitted
            weights_path: WSPRWT01 weight file; seeded random weights when omitted
            vocab_path: Vocabulary file; the built-in toy vocabulary when omitted
            manifest_path: Optional special-token manifest for the vocabulary
            seed: Seed for random weights
            verbose: Enable debug logging
            preset: Model size used when no config file is given

        Returns:
            A ready SpeechAgentFramework
        """
        from speech_vocab import Vocabulary
        from speech_model import ModelConfig, SpeechModel, load_weights, random_weights

        init_logging(logging.DEBUG if verbose else logging.INFO)
        vocab = Vocabulary.load(vocab_path, manifest_path) if vocab_path else Vocabulary.default()
        if config_path:
            config = ModelConfig.from_file(config_path)
        else:
            config = ModelConfig.preset(preset, vocab_size=vocab.n_vocab)
        if config.vocab_size != vocab.n_vocab:
            from speech_model import ConfigError
            raise ConfigError(
                f"config vocab_size {config.vocab_size} does not match vocabulary size {vocab.n_vocab}"
            )

        if weights_path:
            weights = load_weights(weights_path, config)
        else:
            weights = random_weights(config, seed)
        model = SpeechModel.from_weights(config, weights)
        return cls(model, vocab, verbose=verbose)

    def init_agents_as_needed(self):
        """Initialize agents if they haven't been initialized yet"""
        if not self.transcription_agent:
            self.log("Initializing SpeechMind Agent Framework")
            from agents.transcription_agent import TranscriptionAgent
            from agents.evaluation_agent import EvaluationAgent
            from agents.planning_agent import PlanningAgent

            self.transcription_agent = TranscriptionAgent(self.model, self.vocab)
            self.evaluation_agent = EvaluationAgent()
            self.planning_agent = PlanningAgent(self.transcription_agent, self.evaluation_agent)
            self.log("SpeechMind Agent Framework is ready")

    def log(self, message: str):
        """Log a message with the agent framework prefix"""
        text = BG_BLUE + WHITE + "[SpeechMind Framework] " + message + RESET
        logging.info(text)

    def transcribe(self, audio, options=None) -> Transcript:
        """Transcribe an in-memory AudioBuffer"""
        self.init_agents_as_needed()
        return self.transcription_agent.transcribe(audio, options)

    def transcribe_files(self, paths: List[str], options=None, jobs: int = 1):
        """Transcribe several files with a bounded worker pool"""
        self.init_agents_as_needed()
        self.log(f"Transcribing {len(paths)} file(s) with {jobs} worker(s)")
        return self.planning_agent.transcribe_batch(paths, options, jobs=jobs)

    def detect_language(self, audio) -> Dict[str, float]:
        """Language probabilities for the first 30 seconds of audio"""
        self.init_agents_as_needed()
        return self.transcription_agent.detect_language(audio)

    def evaluate(self, manifest, options=None, normalizer=None, jobs: int = 1):
        """Evaluate the transcription pipeline on a manifest"""
        self.init_agents_as_needed()
        pipeline = self.planning_agent.pipeline_for(options)
        return self.evaluation_agent.evaluate(manifest, pipeline, normalizer=normalizer, jobs=jobs)

    def noise_sweep(self, manifest, snr_list, noise=None, seed: int = 0,
                    options=None, normalizer=None, jobs: int = 1):
        """WER as a function of SNR under additive noise"""
        self.init_agents_as_needed()
        pipeline = self.planning_agent.pipeline_for(options)
        return self.evaluation_agent.noise_sweep(
            manifest, pipeline, snr_list, noise=noise, seed=seed, normalizer=normalizer, jobs=jobs
        )

    def ablate(self, manifest, options=None, toggles=None, normalizer=None, jobs: int = 1):
        """Run the cumulative long-form heuristic stack"""
        self.init_agents_as_needed()
        return self.planning_agent.ablation_matrix(
            manifest, base_options=options, toggles=toggles, normalizer=normalizer, jobs=jobs
        )
