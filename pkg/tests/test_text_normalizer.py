import os
import random

import pytest

from text_normalizer import (
    LETTER_SPACED_LANGUAGES, NormalizerError, RuleTable, TextNormalizer, basic_normalize, default_rules,
    english_normalize, normalize, number_rewrite, remove_bracketed,
)

GOLDEN = os.path.join(os.path.dirname(__file__), "fixtures", "normalizer_golden.tsv")

FUZZ_WORDS = [
    "hello", "The", "Colour", "centre", "can't", "I'm", "won't", "it's", "um", "uh", "hmm", "one", "two",
    "twenty", "hundred", "thousand", "first", "second", "third", "point", "five", "and", "dollars", "cents",
    "percent", "5", "42", "3.5", "$7", "1,000", "café", "Zoë", "(aside)", "[noise]", ",", ".", "!", "?", "-",
    "'", "don", "t", "grey",
]
ENGLISH_SCRIPT_WORDS = ["İstanbul", "straße", "ÉCOLE", "niño", "你好", "ไทย", "น้ำ", "Ωmega", "ﬁne"]
BASIC_SCRIPT_WORDS = [
    "IŞIK", "Ça", "va?", "你好，", "世界。", "¡Hola!", "naïve", "e\u0301", "Ǆemal", "ℌ", "①", "Ⅻ", "ｆｕｌｌ", "—", "…",
    "한국어", "日本語", "(note", "]",
]


def golden_pairs():
    pairs = []
    with open(GOLDEN, "r", encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            raw, expected = line.split("\t")
            pairs.append((raw, expected))
    return pairs


@pytest.mark.parametrize("raw, expected", golden_pairs())
def test_english_golden(raw, expected):
    assert english_normalize(raw) == expected


def test_golden_set_is_large_enough():
    assert len(golden_pairs()) >= 100


@pytest.mark.parametrize("raw, expected", golden_pairs())
def test_english_is_idempotent_on_golden(raw, expected):
    assert english_normalize(expected) == expected


def fuzz_text(rng, words):
    return " ".join(rng.choice(words) for _ in range(rng.randint(0, 12)))


def test_english_is_idempotent_on_random_text():
    rng = random.Random(42)
    words = FUZZ_WORDS + ENGLISH_SCRIPT_WORDS
    for _ in range(10_000):
        text = fuzz_text(rng, words)
        once = english_normalize(text)
        assert english_normalize(once) == once, text


@pytest.mark.parametrize("language", [None, "en", "tr", "de", "zh", "ja", "th"])
def test_basic_is_idempotent_on_random_text(language):
    rng = random.Random(f"basic-{language}")
    words = FUZZ_WORDS + ENGLISH_SCRIPT_WORDS + BASIC_SCRIPT_WORDS
    for _ in range(10_000):
        text = fuzz_text(rng, words)
        once = basic_normalize(text, language)
        assert basic_normalize(once, language) == once, text


def test_basic_lowercasing_does_not_leave_marks():
    once = basic_normalize("İstanbul", "tr")
    assert once == "i stanbul"
    assert basic_normalize(once, "tr") == once
    assert basic_normalize("ℌello Ⅻ", None) == "hello xii"


def test_every_contraction_expands_to_its_normalized_form():
    rules = default_rules()
    assert len(rules.contractions) >= 50
    for contraction, expansion in rules.contractions.items():
        assert english_normalize(contraction) == english_normalize(expansion)
        assert english_normalize(contraction.replace("'", "’")) == english_normalize(expansion)
        assert "'" not in english_normalize(contraction)


def test_spelling_table_is_closed():
    rules = default_rules()
    for british, american in rules.spellings.items():
        assert english_normalize(british) == american
        assert american not in rules.spellings


def test_empty_and_bracket_only_inputs():
    assert english_normalize("") == ""
    assert english_normalize("(a) [b] (c)") == ""
    assert basic_normalize("") == ""


def test_remove_bracketed_handles_nesting():
    assert remove_bracketed("a [b [c] d] e").split() == ["a", "e"]
    assert remove_bracketed("a (b (c) d) e").split() == ["a", "e"]
    assert remove_bracketed("unclosed [bracket") == "unclosed [bracket"


def test_number_rewrite_leaves_plain_words():
    assert number_rewrite("nothing to see here") == "nothing to see here"
    assert number_rewrite("one hundred and second") == "100 and second"


def test_basic_mode():
    assert basic_normalize("Hello, World!") == "hello world"
    assert basic_normalize("[music] Guten Tag!") == "guten tag"
    assert basic_normalize("Café crème") == "café crème"
    assert basic_normalize("it's") == "it s"


@pytest.mark.parametrize("language", sorted(LETTER_SPACED_LANGUAGES))
def test_letter_spacing_for_unspaced_scripts(language):
    assert basic_normalize("你好，世界", language) == "你 好 世 界"
    once = basic_normalize("你好，世界", language)
    assert basic_normalize(once, language) == once


def test_other_languages_keep_words():
    assert basic_normalize("你好，世界", "de") == "你好 世界"


def test_modes():
    assert normalize("Um, HELLO", "none") == "Um, HELLO"
    assert normalize("Um, HELLO", "english") == "hello"
    assert normalize("Um, HELLO", "basic") == "um hello"
    assert normalize("Um, HELLO", "auto") == "hello"
    assert normalize("Um, HELLO", "auto", language="en") == "hello"
    assert normalize("Um, HELLO", "auto", language="de") == "um hello"
    with pytest.raises(NormalizerError):
        normalize("x", "shouting")


def test_text_normalizer_callable():
    normalizer = TextNormalizer("auto")
    assert normalizer("The colour, um, red", "en") == "the color red"
    assert normalizer("你好", "zh") == "你 好"
    with pytest.raises(NormalizerError):
        TextNormalizer("loud")


def test_rule_table_validation(tmp_path):
    with pytest.raises(NormalizerError):
        RuleTable(contractions={"same": "same"})
    with pytest.raises(NormalizerError):
        RuleTable(spellings={"colour": "color", "color": "hue"})

    rules = RuleTable(contractions={"gonna": "going to"}, spellings={"realise": "realize"}, fillers=["er"])
    assert english_normalize("Er, I'm gonna realise it", rules) == "i am going to realize it"


def test_rule_table_falls_back_to_builtin_tables(tmp_path):
    rules = RuleTable.load(str(tmp_path))
    assert rules.contractions["won't"] == "will not"
    assert "um" in rules.fillers
    assert english_normalize("My favourite", rules) == "my favorite"
