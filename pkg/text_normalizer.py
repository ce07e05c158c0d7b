"""
Transcript normalization applied to both references and hypotheses before
scoring, so that formatting differences are not counted as errors.

Two modes: an English normalizer (fillers, contractions, spelled numbers,
British spellings) and a basic one for every other language.
"""
import os
import re
import logging
import unicodedata
from dataclasses import dataclass, field
from decimal import Decimal
from functools import lru_cache
from typing import Dict, List, Optional, Tuple

from speech_agent_framework import SpeechMindError

logger = logging.getLogger(__name__)

DATA_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "data")

# Languages written without spaces between words; letters are spaced out instead
LETTER_SPACED_LANGUAGES = {"zh", "ja", "th", "lo", "my"}
KEEP_SYMBOLS = ".%$¢€£"
MODES = ("english", "basic", "none", "auto")

ONES = {
    "zero": 0, "one": 1, "two": 2, "three": 3, "four": 4,
    "five": 5, "six": 6, "seven": 7, "eight": 8, "nine": 9,
}
TEENS = {
    "ten": 10, "eleven": 11, "twelve": 12, "thirteen": 13, "fourteen": 14,
    "fifteen": 15, "sixteen": 16, "seventeen": 17, "eighteen": 18, "nineteen": 19,
}
TENS = {
    "twenty": 20, "thirty": 30, "forty": 40, "fifty": 50,
    "sixty": 60, "seventy": 70, "eighty": 80, "ninety": 90,
}
MAGNITUDES = {"thousand": 10 ** 3, "million": 10 ** 6, "billion": 10 ** 9, "trillion": 10 ** 12}
ORDINAL_ONES = {
    "first": 1, "second": 2, "third": 3, "fourth": 4, "fifth": 5,
    "sixth": 6, "seventh": 7, "eighth": 8, "ninth": 9,
}
ORDINAL_TEENS = {
    "tenth": 10, "eleventh": 11, "twelfth": 12, "thirteenth": 13, "fourteenth": 14,
    "fifteenth": 15, "sixteenth": 16, "seventeenth": 17, "eighteenth": 18, "nineteenth": 19,
}
ORDINAL_TENS = {
    "twentieth": 20, "thirtieth": 30, "fortieth": 40, "fiftieth": 50,
    "sixtieth": 60, "seventieth": 70, "eightieth": 80, "ninetieth": 90,
}
ORDINAL_MAGNITUDES = {"thousandth": 10 ** 3, "millionth": 10 ** 6, "billionth": 10 ** 9, "trillionth": 10 ** 12}
CURRENCY_WORDS = {"dollar": "$", "dollars": "$", "pound": "£", "pounds": "£", "euro": "€", "euros": "€"}
CENT_WORDS = ("cent", "cents")

NUMERIC_TOKEN = re.compile(r"^([$£€¢]?)(\d+(?:\.\d+)?)(%|st|nd|rd|th)?$")

CONTRACTION_SUFFIXES = [
    (re.compile(r"(\w)n't\b"), r"\1 not"),
    (re.compile(r"(\w)'re\b"), r"\1 are"),
    (re.compile(r"(\w)'ve\b"), r"\1 have"),
    (re.compile(r"(\w)'ll\b"), r"\1 will"),
    (re.compile(r"(\w)'d\b"), r"\1 would"),
    (re.compile(r"(\w)'m\b"), r"\1 am"),
]

FALLBACK_FILLERS = ["hmm", "mm", "mhm", "mmm", "uh", "um"]
FALLBACK_CONTRACTIONS = {"won't": "will not", "can't": "can not", "let's": "let us", "it's": "it is"}
FALLBACK_SPELLINGS = {"colour": "color", "favourite": "favorite", "centre": "center", "theatre": "theater"}


class NormalizerError(SpeechMindError, ValueError):
    code = "normalizer_error"
    input_error = True


def _read_table(path: str) -> Dict[str, str]:
    table = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            key, value = line.split("\t")
            table[key.strip()] = value.strip()
    return table


@dataclass
class RuleTable:
    """Word-level rewrite tables used by the English normalizer"""
    contractions: Dict[str, str] = field(default_factory=dict)
    spellings: Dict[str, str] = field(default_factory=dict)
    fillers: List[str] = field(default_factory=list)

    def __post_init__(self):
        for name, table in (("contraction", self.contractions), ("spelling", self.spellings)):
            for key, value in table.items():
                if not key or key == value:
                    raise NormalizerError(f"{name} rule {key!r} -> {value!r} is not a rewrite")
        for key, value in self.spellings.items():
            if value in self.spellings:
                raise NormalizerError(f"spelling {key!r} rewrites to another rewritten word {value!r}")

        self._filler_pattern = None
        if self.fillers:
            alternatives = "|".join(re.escape(word) for word in sorted(self.fillers, key=len, reverse=True))
            self._filler_pattern = re.compile(rf"\b(?:{alternatives})\b")
        self._contraction_pattern = None
        if self.contractions:
            alternatives = "|".join(re.escape(word) for word in sorted(self.contractions, key=len, reverse=True))
            self._contraction_pattern = re.compile(rf"\b(?:{alternatives})\b")

    @classmethod
    def load(cls, data_dir: str = DATA_DIR) -> 'RuleTable':
        """Load contractions.tsv, spellings.tsv and fillers.txt, falling back to small built-in tables"""
        contractions_file = os.path.join(data_dir, "contractions.tsv")
        spellings_file = os.path.join(data_dir, "spellings.tsv")
        fillers_file = os.path.join(data_dir, "fillers.txt")

        if os.path.exists(contractions_file):
            contractions = _read_table(contractions_file)
        else:
            logger.warning("Missing %s, using built-in contractions", contractions_file)
            contractions = dict(FALLBACK_CONTRACTIONS)

        if os.path.exists(spellings_file):
            spellings = _read_table(spellings_file)
        else:
            logger.warning("Missing %s, using built-in spellings", spellings_file)
            spellings = dict(FALLBACK_SPELLINGS)

        if os.path.exists(fillers_file):
            with open(fillers_file, "r", encoding="utf-8") as f:
                fillers = [line.strip() for line in f if line.strip() and not line.startswith("#")]
        else:
            fillers = list(FALLBACK_FILLERS)
        return cls(contractions=contractions, spellings=spellings, fillers=fillers)

    def remove_fillers(self, text: str) -> str:
        if self._filler_pattern is None:
            return text
        return self._filler_pattern.sub(" ", text)

    def expand_contractions(self, text: str) -> str:
        if self._contraction_pattern is not None:
            text = self._contraction_pattern.sub(lambda match: self.contractions[match.group(0)], text)
        for pattern, replacement in CONTRACTION_SUFFIXES:
            text = pattern.sub(replacement, text)
        return text

    def standardize_spellings(self, text: str) -> str:
        return " ".join(self.spellings.get(word, word) for word in text.split())


@lru_cache(maxsize=None)
def default_rules() -> RuleTable:
    return RuleTable.load()


def squeeze_whitespace(text: str) -> str:
    return re.sub(r"\s+", " ", text).strip()


def remove_bracketed(text: str) -> str:
    """Drop [...] and (...) spans, innermost first, until none are left"""
    previous = None
    while previous != text:
        previous = text
        text = re.sub(r"\[[^\[\]]*\]", " ", text)
        text = re.sub(r"\([^()]*\)", " ", text)
    return text


def remove_symbols(text: str) -> str:
    """NFKC, then every mark, symbol or punctuation character becomes a space"""
    return "".join(
        " " if unicodedata.category(char)[0] in "MSP" else char
        for char in unicodedata.normalize("NFKC", text)
    )


def remove_symbols_and_diacritics(text: str, keep: str = KEEP_SYMBOLS) -> str:
    """NFKD, drop combining marks and apostrophes, replace other marks, symbols and punctuation with spaces"""
    characters = []
    for char in unicodedata.normalize("NFKD", text):
        if char in keep:
            characters.append(char)
        elif char == "'":
            continue
        elif unicodedata.category(char) == "Mn":
            continue
        elif unicodedata.category(char)[0] in "MSP":
            characters.append(" ")
        else:
            characters.append(char)
    return "".join(characters)


def remove_residual_symbols(text: str) -> str:
    """Keep . % and currency signs only inside numeric expressions"""
    words = []
    for word in text.split():
        if NUMERIC_TOKEN.match(word):
            words.append(word)
        else:
            words.extend(re.sub(r"[.%$¢€£]", " ", word).split())
    return " ".join(words)


def _classify(word: str) -> Optional[Tuple[str, int, bool]]:
    """(kind, value, is_ordinal) of a number word, or None"""
    for table, kind, ordinal in (
        (ONES, "ones", False), (ORDINAL_ONES, "ones", True),
        (TEENS, "teens", False), (ORDINAL_TEENS, "teens", True),
        (TENS, "tens", False), (ORDINAL_TENS, "tens", True),
        (MAGNITUDES, "magnitude", False), (ORDINAL_MAGNITUDES, "magnitude", True),
    ):
        if word in table:
            return kind, table[word], ordinal
    if word == "hundred":
        return "hundred", 100, False
    if word == "hundredth":
        return "hundred", 100, True
    return None


def _parse_spelled(words: List[str], start: int) -> Optional[Tuple[int, bool, int]]:
    """
    Parse the longest spelled-out number starting at words[start].

    Returns:
        (value, is_ordinal, end index) or None when no number starts here
    """
    total, current = 0, 0
    last_kind, last_magnitude = None, None
    ordinal = False
    j = start
    while j < len(words):
        word = words[j]
        info = _classify(word)
        if info is None:
            if word == "and" and last_kind in ("hundred", "magnitude") and j + 1 < len(words):
                following = _classify(words[j + 1])
                if following and following[0] in ("ones", "teens", "tens") and words[j + 1] != "second":
                    last_kind = "and"
                    j += 1
                    continue
            break

        kind, value, is_ordinal = info
        # a lone "second" is a unit of time, not an ordinal
        if word == "second" and last_kind != "tens":
            break
        if kind in ("ones", "teens", "tens"):
            if last_kind in ("ones", "teens"):
                break
            if last_kind == "tens" and kind != "ones":
                break
            current += value
        elif kind == "hundred":
            if last_kind == "hundred" or current >= 100:
                break
            current = (current or 1) * 100
        else:
            if last_magnitude is not None and value >= last_magnitude:
                break
            total += (current or 1) * value
            current = 0
            last_magnitude = value
        last_kind = kind
        j += 1
        if is_ordinal:
            ordinal = True
            break

    if j == start:
        return None
    return total + current, ordinal, j


def _ordinal_suffix(value: int) -> str:
    if value % 100 in (11, 12, 13):
        return "th"
    return {1: "st", 2: "nd", 3: "rd"}.get(value % 10, "th")


def _format_decimal(value: Decimal) -> str:
    if value == value.to_integral_value():
        return str(int(value))
    return format(value.normalize(), "f")


def _parse_cents(words: List[str], start: int) -> Optional[Tuple[int, int]]:
    """'and <number> cents' after a currency amount -> (cents, end index)"""
    if start >= len(words) or words[start] != "and":
        return None
    j = start + 1
    if j < len(words) and words[j].isdigit():
        value, end = int(words[j]), j + 1
    else:
        parsed = _parse_spelled(words, j)
        if parsed is None or parsed[1]:
            return None
        value, _, end = parsed
    if end < len(words) and words[end] in CENT_WORDS and value < 100:
        return value, end + 1
    return None


def _split_hyphenated(words: List[str]) -> List[str]:
    split = []
    for word in words:
        parts = word.split("-")
        if len(parts) > 1 and all(part and _classify(part) for part in parts):
            split.extend(parts)
        else:
            split.append(word)
    return split


def number_rewrite(text: str) -> str:
    """
    Turn spelled-out cardinals, ordinals, decimals, percentages and currency
    amounts into digit form: "sixty eight" -> "68", "ten thousand dollars" ->
    "$10000", "3.5 percent" -> "3.5%", "twenty first" -> "21st".
    """
    words = _split_hyphenated(text.split())
    output = []
    i = 0
    while i < len(words):
        numeric = NUMERIC_TOKEN.match(words[i])
        if numeric:
            prefix, digits, suffix = numeric.group(1), numeric.group(2), numeric.group(3) or ""
            j = i + 1
            if not suffix:
                multiplier = 1
                while j < len(words) and (words[j] == "hundred" or words[j] in MAGNITUDES):
                    multiplier *= 100 if words[j] == "hundred" else MAGNITUDES[words[j]]
                    j += 1
                if multiplier != 1:
                    digits = _format_decimal(Decimal(digits) * multiplier)
        else:
            parsed = _parse_spelled(words, i)
            if parsed is None:
                output.append(words[i])
                i += 1
                continue
            value, ordinal, j = parsed
            prefix, digits, suffix = "", str(value), ""
            if ordinal:
                suffix = _ordinal_suffix(value)
            elif j + 1 < len(words) and words[j] == "point" and words[j + 1] in ONES:
                fraction = []
                j += 1
                while j < len(words) and words[j] in ONES:
                    fraction.append(str(ONES[words[j]]))
                    j += 1
                digits = f"{digits}.{''.join(fraction)}"

        if not suffix and not prefix:
            if j < len(words) and words[j] == "percent":
                suffix = "%"
                j += 1
            elif j + 1 < len(words) and words[j] == "per" and words[j + 1] == "cent":
                suffix = "%"
                j += 2
            elif j < len(words) and words[j] in CURRENCY_WORDS:
                prefix = CURRENCY_WORDS[words[j]]
                j += 1
                cents = _parse_cents(words, j) if "." not in digits else None
                if cents is not None:
                    digits = f"{digits}.{cents[0]:02d}"
                    j = cents[1]
            elif "." not in digits and j < len(words) and words[j] in CENT_WORDS:
                prefix = "¢"
                j += 1

        output.append(prefix + digits + suffix)
        i = j
    return " ".join(output)


def basic_normalize(text: str, language: Optional[str] = None) -> str:
    """Bracket removal, symbol removal, lowercase; letter-spaced for languages without word spacing"""
    text = remove_bracketed(text)
    # lowercasing can emit combining marks (İ -> i + U+0307) and NFKC can emit capitals
    previous = None
    while previous != text:
        previous = text
        text = remove_symbols(text.lower())
    text = squeeze_whitespace(text)
    if language in LETTER_SPACED_LANGUAGES:
        text = " ".join(char for char in text if not char.isspace())
    return text


def english_normalize(text: str, rules: Optional[RuleTable] = None) -> str:
    """Full English normalization; idempotent on its own output"""
    rules = rules or default_rules()
    text = text.lower()
    text = remove_bracketed(text)
    text = rules.remove_fillers(text)
    text = text.replace("’", "'")
    text = re.sub(r"\s+'", "'", text)
    text = rules.expand_contractions(text)
    text = re.sub(r"(\d),(\d)", r"\1\2", text)
    text = re.sub(r"\.(?!\d)", " ", text)
    text = remove_symbols_and_diacritics(text)
    # stripping apostrophes and marks can join letters back into fillers or stray symbols
    text = remove_residual_symbols(text)
    text = rules.remove_fillers(text)
    text = number_rewrite(text)
    text = rules.standardize_spellings(text)
    text = remove_residual_symbols(text)
    return squeeze_whitespace(text.lower())


def normalize(text: str, mode: str = "english", language: Optional[str] = None,
              rules: Optional[RuleTable] = None) -> str:
    """
    Normalize a transcript.

    Args:
        text: Raw transcript
        mode: english, basic, none, or auto (english for en or unknown language, basic otherwise)
        language: Language code; enables letter spacing for zh/ja/th/lo/my in basic mode
        rules: Rule tables for the English mode

    Returns:
        Normalized text
    """
    if mode not in MODES:
        raise NormalizerError(f"unknown normalizer mode {mode!r}")
    if mode == "auto":
        mode = "english" if language in (None, "en") else "basic"
    if mode == "none":
        return text
    if mode == "english":
        return english_normalize(text, rules)
    return basic_normalize(text, language)


class TextNormalizer:
    """Callable normalizer with a fixed mode, used by the evaluation harness"""

    def __init__(self, mode: str = "auto", rules: Optional[RuleTable] = None):
        if mode not in MODES:
            raise NormalizerError(f"unknown normalizer mode {mode!r}")
        self.mode = mode
        self.rules = rules

    def __call__(self, text: str, language: Optional[str] = None) -> str:
        return normalize(text, self.mode, language, self.rules)
