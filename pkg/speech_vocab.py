"""
Byte-level BPE vocabulary with the multitask special-token block.

Ids are dense: byte tokens first, then merged tokens, then the special tokens
(end-of-text, start-of-transcript, one token per language, task tokens,
previous-text and no-speech markers, and 1501 timestamps on a 20 ms grid).
"""
import json
import base64
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import tiktoken

from speech_agent_framework import SpeechMindError, Segment

logger = logging.getLogger(__name__)

LANGUAGES = {
    "en": "english", "zh": "chinese", "de": "german", "es": "spanish", "ru": "russian", "ko": "korean",
    "fr": "french", "ja": "japanese", "pt": "portuguese", "tr": "turkish", "pl": "polish", "ca": "catalan",
    "nl": "dutch", "ar": "arabic", "sv": "swedish", "it": "italian", "id": "indonesian", "hi": "hindi",
    "fi": "finnish", "vi": "vietnamese", "he": "hebrew", "uk": "ukrainian", "el": "greek", "ms": "malay",
    "cs": "czech", "ro": "romanian", "da": "danish", "hu": "hungarian", "ta": "tamil", "no": "norwegian",
    "th": "thai", "ur": "urdu", "hr": "croatian", "bg": "bulgarian", "lt": "lithuanian", "la": "latin",
    "mi": "maori", "ml": "malayalam", "cy": "welsh", "sk": "slovak", "te": "telugu", "fa": "persian",
    "lv": "latvian", "bn": "bengali", "sr": "serbian", "az": "azerbaijani", "sl": "slovenian", "kn": "kannada",
    "et": "estonian", "mk": "macedonian", "br": "breton", "eu": "basque", "is": "icelandic", "hy": "armenian",
    "ne": "nepali", "mn": "mongolian", "bs": "bosnian", "kk": "kazakh", "sq": "albanian", "sw": "swahili",
    "gl": "galician", "mr": "marathi", "pa": "punjabi", "si": "sinhala", "km": "khmer", "sn": "shona",
    "yo": "yoruba", "so": "somali", "af": "afrikaans", "oc": "occitan", "ka": "georgian", "be": "belarusian",
    "tg": "tajik", "sd": "sindhi", "gu": "gujarati", "am": "amharic", "yi": "yiddish", "lo": "lao",
    "uz": "uzbek", "fo": "faroese", "ht": "haitian creole", "ps": "pashto", "tk": "turkmen", "nn": "nynorsk",
    "mt": "maltese", "sa": "sanskrit", "lb": "luxembourgish", "my": "myanmar", "bo": "tibetan", "tl": "tagalog",
    "mg": "malagasy", "as": "assamese", "tt": "tatar", "haw": "hawaiian", "ln": "lingala", "ha": "hausa",
    "ba": "bashkir", "jw": "javanese", "su": "sundanese",
}

TASKS = ("transcribe", "translate")
TIMESTAMPS_PER_SECOND = 50  # 20 ms resolution
N_TIMESTAMPS = 1501  # 0.00 .. 30.00 s
MAX_TIMESTAMP = (N_TIMESTAMPS - 1) / TIMESTAMPS_PER_SECOND
DEFAULT_TEXT_CTX = 448

PRETOKENIZE_PATTERN = r"""'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+"""

# Small English merge list used when no vocabulary file is given
DEFAULT_MERGES = [
    (b" ", b"t"), (b"h", b"e"), (b" t", b"he"), (b"i", b"n"), (b" ", b"a"),
    (b"e", b"r"), (b"o", b"n"), (b" ", b"s"), (b"r", b"e"), (b"a", b"t"),
    (b"e", b"n"), (b"o", b"r"), (b" ", b"w"), (b"e", b"s"), (b"i", b"s"),
    (b"in", b"g"), (b" ", b"o"), (b"a", b"n"), (b" ", b"i"), (b"o", b"u"),
]


class VocabularyError(SpeechMindError):
    code = "vocabulary_error"
    input_error = True


class TokenRangeError(VocabularyError):
    """Token id outside [0, n_vocab)"""
    code = "token_range"


class TimestampRangeError(VocabularyError):
    """Seconds outside the 0-30 s timestamp grid"""
    code = "timestamp_range"


class TimestampDomainError(VocabularyError):
    """A non-timestamp id was passed where a timestamp token was expected"""
    code = "timestamp_domain"


class PromptValidationError(VocabularyError):
    code = "prompt_invalid"


class ProtocolViolationError(VocabularyError):
    """Decoded token stream breaks the timestamp grammar"""
    code = "protocol_violation"
    input_error = False


def special_token_names() -> List[str]:
    """All special token names, in id order"""
    return [
        "<|endoftext|>",
        "<|startoftranscript|>",
        *[f"<|{code}|>" for code in LANGUAGES],
        "<|translate|>",
        "<|transcribe|>",
        "<|startoflm|>",
        "<|startofprev|>",
        "<|nospeech|>",
        "<|notimestamps|>",
        *[f"<|{i / TIMESTAMPS_PER_SECOND:.2f}|>" for i in range(N_TIMESTAMPS)],
    ]


@dataclass(frozen=True)
class SpecialTokens:
    """Ids of the control tokens of one vocabulary"""
    eot: int
    sot: int
    languages: Dict[str, int]
    translate: int
    transcribe: int
    sot_lm: int
    sot_prev: int
    no_speech: int
    no_timestamps: int
    timestamp_begin: int

    @classmethod
    def from_manifest(cls, manifest: Dict[str, int]) -> 'SpecialTokens':
        try:
            specials = cls(
                eot=manifest["<|endoftext|>"],
                sot=manifest["<|startoftranscript|>"],
                languages={code: manifest[f"<|{code}|>"] for code in LANGUAGES},
                translate=manifest["<|translate|>"],
                transcribe=manifest["<|transcribe|>"],
                sot_lm=manifest["<|startoflm|>"],
                sot_prev=manifest["<|startofprev|>"],
                no_speech=manifest["<|nospeech|>"],
                no_timestamps=manifest["<|notimestamps|>"],
                timestamp_begin=manifest["<|0.00|>"],
            )
        except KeyError as e:
            raise VocabularyError(f"special-token manifest is missing {e.args[0]}") from e

        for i in range(N_TIMESTAMPS):
            name = f"<|{i / TIMESTAMPS_PER_SECOND:.2f}|>"
            if manifest.get(name) != specials.timestamp_begin + i:
                raise VocabularyError(f"timestamp tokens must be contiguous; {name} is out of place")
        return specials

    @property
    def timestamp_end(self) -> int:
        """Last timestamp id (30.00 s)"""
        return self.timestamp_begin + N_TIMESTAMPS - 1

    @property
    def task_ids(self) -> Dict[str, int]:
        return {"transcribe": self.transcribe, "translate": self.translate}

    @property
    def language_ids(self) -> List[int]:
        return list(self.languages.values())

    @property
    def non_content_ids(self) -> List[int]:
        """Control tokens that may never appear in decoded content"""
        return sorted([
            self.sot, *self.languages.values(), self.translate, self.transcribe,
            self.sot_lm, self.sot_prev, self.no_speech, self.no_timestamps,
        ])

    def is_timestamp(self, token: int) -> bool:
        return self.timestamp_begin <= token <= self.timestamp_end

    def language_of(self, token: int) -> Optional[str]:
        for code, language_id in self.languages.items():
            if language_id == token:
                return code
        return None


@dataclass
class TaskSpec:
    """What the decoder is asked to do for one 30-second window"""
    language: Optional[str] = None
    task: str = "transcribe"
    timestamps: bool = True
    prev_text: Optional[str] = None
    prev_tokens: List[int] = field(default_factory=list)

    def validate(self):
        if self.language is not None and self.language not in LANGUAGES:
            raise PromptValidationError(f"unsupported language code: {self.language!r}")
        if self.task not in TASKS:
            raise PromptValidationError(f"unsupported task: {self.task!r}")


def _read_ranks(path: str) -> Dict[bytes, int]:
    ranks = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                token, rank = line.split()
                ranks[base64.b64decode(token)] = int(rank)
            except ValueError as e:
                raise VocabularyError(f"{path}:{line_number}: expected '<base64 token> <rank>'") from e
    return ranks


class Vocabulary:
    """
    Byte-level BPE tokenizer plus the special-token layout.

    Encoding runs greedy lowest-rank merges through tiktoken; the rank of a
    token is its id.
    """

    def __init__(self, mergeable_ranks: Dict[bytes, int], special_manifest: Optional[Dict[str, int]] = None,
                 name: str = "speechmind"):
        self._validate_ranks(mergeable_ranks)
        n_mergeable = len(mergeable_ranks)

        if special_manifest is None:
            special_manifest = {token: n_mergeable + i for i, token in enumerate(special_token_names())}
        ids = sorted(special_manifest.values())
        if ids != list(range(n_mergeable, n_mergeable + len(ids))):
            raise VocabularyError("special-token ids must follow the merged tokens without gaps")

        self.name = name
        self.mergeable_ranks = dict(mergeable_ranks)
        self.special_manifest = dict(special_manifest)
        self.specials = SpecialTokens.from_manifest(special_manifest)
        self.n_text_tokens = n_mergeable
        self.n_vocab = n_mergeable + len(special_manifest)
        self._id_to_special = {token_id: token for token, token_id in special_manifest.items()}
        self._encoding = tiktoken.Encoding(
            name=name,
            explicit_n_vocab=self.n_vocab,
            pat_str=PRETOKENIZE_PATTERN,
            mergeable_ranks=self.mergeable_ranks,
            special_tokens=self.special_manifest,
        )
        logger.debug("Vocabulary %s: %d text tokens, %d specials", name, n_mergeable, len(special_manifest))

    @staticmethod
    def _validate_ranks(ranks: Dict[bytes, int]):
        if sorted(ranks.values()) != list(range(len(ranks))):
            raise VocabularyError("token ranks must be dense from 0")
        for byte in range(256):
            if ranks.get(bytes([byte])) != byte:
                raise VocabularyError(f"byte token {byte} must have id {byte}")
        for token, rank in ranks.items():
            if len(token) < 2:
                continue
            derivable = any(
                ranks.get(token[:i], rank) < rank and ranks.get(token[i:], rank) < rank
                for i in range(1, len(token))
            )
            if not derivable:
                raise VocabularyError(f"merged token {token!r} (id {rank}) is not built from earlier tokens")

    @classmethod
    def from_merges(cls, merges: Sequence[Tuple[bytes, bytes]], name: str = "speechmind") -> 'Vocabulary':
        """Build a vocabulary from an ordered merge list on top of the 256 byte tokens"""
        ranks = {bytes([i]): i for i in range(256)}
        for left, right in merges:
            if left not in ranks or right not in ranks:
                raise VocabularyError(f"merge ({left!r}, {right!r}) references an undefined token")
            merged = left + right
            if merged in ranks:
                raise VocabularyError(f"merge ({left!r}, {right!r}) duplicates an existing token")
            ranks[merged] = len(ranks)
        return cls(ranks, name=name)

    @classmethod
    def default(cls) -> 'Vocabulary':
        return cls.from_merges(DEFAULT_MERGES, name="speechmind-toy")

    @classmethod
    def load(cls, path: str, manifest_path: Optional[str] = None) -> 'Vocabulary':
        """
        Load '<base64 token> <rank>' lines and an optional JSON manifest of special-token ids.
        """
        try:
            ranks = _read_ranks(path)
        except OSError as e:
            raise VocabularyError(f"cannot read vocabulary {path}: {e}") from e

        manifest = None
        if manifest_path:
            try:
                with open(manifest_path, "r", encoding="utf-8") as f:
                    manifest = {str(k): int(v) for k, v in json.load(f).items()}
            except (OSError, ValueError, AttributeError) as e:
                raise VocabularyError(f"cannot read special-token manifest {manifest_path}: {e}") from e
        return cls(ranks, manifest)

    def save(self, path: str, manifest_path: Optional[str] = None):
        with open(path, "w", encoding="utf-8") as f:
            for token, rank in sorted(self.mergeable_ranks.items(), key=lambda item: item[1]):
                f.write(f"{base64.b64encode(token).decode('ascii')} {rank}\n")
        if manifest_path:
            with open(manifest_path, "w", encoding="utf-8") as f:
                json.dump(self.special_manifest, f, indent=1)

    # Text <-> ids

    def encode(self, text: str) -> List[int]:
        """Tokenize plain text; special-token names in the text are treated as ordinary characters"""
        return self._encoding.encode_ordinary(text)

    def decode(self, ids: Sequence[int], skip_special: bool = False) -> str:
        """
        Turn ids back into text. Special tokens render as their <|name|> form
        unless skip_special is set; invalid UTF-8 becomes U+FFFD.
        """
        ids = [int(token) for token in ids]
        for token in ids:
            if not 0 <= token < self.n_vocab:
                raise TokenRangeError(f"token id {token} outside [0, {self.n_vocab})")
        if skip_special:
            ids = [token for token in ids if token < self.n_text_tokens]
        return self._encoding.decode(ids, errors="replace")

    def token_name(self, token: int) -> str:
        if token in self._id_to_special:
            return self._id_to_special[token]
        return self.decode([token])

    # Timestamps

    def timestamp_to_token(self, seconds: float) -> int:
        if not 0.0 <= seconds <= MAX_TIMESTAMP:
            raise TimestampRangeError(f"{seconds} s is outside [0, {MAX_TIMESTAMP:.2f}]")
        return self.specials.timestamp_begin + int(round(seconds * TIMESTAMPS_PER_SECOND))

    def token_to_timestamp(self, token: int) -> float:
        if not self.specials.is_timestamp(token):
            raise TimestampDomainError(f"token {token} is not a timestamp")
        return (token - self.specials.timestamp_begin) / TIMESTAMPS_PER_SECOND

    # Prompts

    def language_token(self, code: str) -> int:
        if code not in LANGUAGES:
            raise PromptValidationError(f"unsupported language code: {code!r}")
        return self.specials.languages[code]

    def build_prompt(self, spec: TaskSpec, n_text_ctx: int = DEFAULT_TEXT_CTX) -> List[int]:
        """
        Assemble the decoder prompt:
        [<|startofprev|> prev...] <|startoftranscript|> <|lang|> <|task|> [<|notimestamps|>]

        Previous text is cut to its last n_text_ctx // 2 - 1 tokens. Without a
        language the prompt stops at <|startoftranscript|> so the next
        position can be scored for language detection.
        """
        spec.validate()
        tokens = []
        previous = list(spec.prev_tokens)
        if spec.prev_text:
            previous = self.encode(spec.prev_text)
        budget = n_text_ctx // 2 - 1
        if previous and budget > 0:
            tokens = [self.specials.sot_prev] + previous[-budget:]

        tokens.append(self.specials.sot)
        if spec.language is None:
            return tokens
        tokens.append(self.specials.languages[spec.language])
        tokens.append(self.specials.task_ids[spec.task])
        if not spec.timestamps:
            tokens.append(self.specials.no_timestamps)
        return tokens

    def _split_header(self, ids: List[int]) -> Tuple[List[int], Optional[bool]]:
        """Drop the prompt prefix; report whether the header disabled timestamps"""
        specials = self.specials
        if specials.sot not in ids:
            return ids, None
        start = len(ids) - 1 - ids[::-1].index(specials.sot)
        position = start + 1
        no_timestamps = False
        header = set(specials.language_ids) | {specials.transcribe, specials.translate, specials.no_timestamps}
        while position < len(ids) and ids[position] in header:
            no_timestamps = no_timestamps or ids[position] == specials.no_timestamps
            position += 1
        return ids[position:], not no_timestamps

    def parse_transcript(self, ids: Sequence[int], chunk_duration: float = MAX_TIMESTAMP,
                         timestamps: Optional[bool] = None) -> List[Segment]:
        """
        Split decoded ids into Segments with window-relative times.

        Timestamped output must follow (start, text..., end)* with
        non-decreasing times; a trailing start with no end becomes a partial
        Segment (end None). Output without timestamps yields one Segment
        spanning the chunk.
        """
        specials = self.specials
        content, header_timestamps = self._split_header([int(token) for token in ids])
        if specials.eot in content:
            content = content[:content.index(specials.eot)]
        for token in content:
            if not 0 <= token < self.n_vocab:
                raise TokenRangeError(f"token id {token} outside [0, {self.n_vocab})")
            if token in specials.non_content_ids:
                raise ProtocolViolationError(f"control token {self.token_name(token)} inside content")

        if timestamps is None:
            timestamps = header_timestamps if header_timestamps is not None else any(
                specials.is_timestamp(token) for token in content)

        if not timestamps:
            if any(specials.is_timestamp(token) for token in content):
                raise ProtocolViolationError("timestamp token in a no-timestamps transcript")
            if not content:
                return []
            return [Segment(0.0, chunk_duration, self.decode(content, skip_special=True), tokens=content)]

        segments = []
        start = None
        text_tokens: List[int] = []
        last_time = 0.0
        for token in content:
            if not specials.is_timestamp(token):
                if start is None:
                    raise ProtocolViolationError("text outside a timestamp pair")
                text_tokens.append(token)
                continue
            seconds = self.token_to_timestamp(token)
            if seconds < last_time:
                raise ProtocolViolationError(f"timestamp {seconds:.2f} goes backwards from {last_time:.2f}")
            last_time = seconds
            if start is None:
                start = seconds
                text_tokens = []
            else:
                segments.append(Segment(start, seconds, self.decode(text_tokens), tokens=text_tokens))
                start = None

        if start is not None:
            segments.append(Segment(start, None, self.decode(text_tokens), tokens=text_tokens, partial=True))
        return segments
