import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ttavid.extract import (INVALID, AnswerFormat, AnswerKind, ExtractedAnswer, canonicalize,
                            extract_answer)

NUM = AnswerFormat(AnswerKind.NUMERIC)
TEXT = AnswerFormat(AnswerKind.FREE_TEXT)


def test_tag_line():
    got = extract_answer("... reasoning ...\nAnswer: G", AnswerFormat.multiple_choice(10))
    assert got == ExtractedAnswer("G", True)


def test_empty_is_invalid(mc4):
    assert extract_answer("", mc4) == ExtractedAnswer.invalid()


def test_boxed_outranks_letter(mc4):
    # rule 3 alone would pick B; the boxed marker fires first
    assert extract_answer("I think B. No wait, \\boxed{D}", mc4).value == "D"


def test_last_boxed_wins(mc4):
    assert extract_answer("\\boxed{A} hmm \\boxed{C}", mc4).value == "C"


def test_last_tag_wins(mc4):
    text = "Answer: A\nOn reflection the answer is C because of frame 3."
    assert extract_answer(text, mc4).value == "C"


def test_trailing_letter_rule(mc4):
    assert extract_answer("Looking at the frames, I'd go with (B)", mc4).value == "B"
    assert extract_answer("First A. then maybe C.", mc4).value == "C"


def test_captured_token_out_of_range_is_invalid(mc4):
    assert extract_answer("Answer: Z", mc4).value == INVALID
    assert extract_answer("\\boxed{E}", mc4).value == INVALID


def test_no_rule_fires(mc4):
    assert not extract_answer("no idea what is going on here", mc4).valid


def test_parenthesized_tag(mc4):
    assert extract_answer("The answer is (b) since the arrow moves left.", mc4).value == "B"


def test_numeric_and_text():
    assert extract_answer("so the total is \\boxed{2.50}", NUM).value == "2.5"
    assert extract_answer("Answer: 1,200 meters", NUM).value == "1200"
    assert extract_answer("The answer is  Red  Panda.", TEXT).value == "red panda"


@pytest.mark.parametrize("raw,fmt,expected", [
    (" g.", AnswerFormat.multiple_choice(10), "G"),
    ("Z", AnswerFormat.multiple_choice(4), INVALID),
    ("(c)", AnswerFormat.multiple_choice(4), "C"),
    ("2.50", NUM, "2.5"),
    ("007", NUM, "7"),
    ("-0.0", NUM, "0"),
    ("1e3", NUM, "1000"),
    ("abc", NUM, INVALID),
    ("  Hello   World!! ", TEXT, "hello world"),
    ("...", TEXT, INVALID),
])
def test_canonicalize(raw, fmt, expected):
    assert canonicalize(raw, fmt) == expected


def test_numeric_canonicalization_oracle():
    # oracle: exact rational value round-trips through the canonical string
    from fractions import Fraction
    for raw in ["2.50", "0.1000", "+3", "12.0", "100", "-4.250"]:
        canon = canonicalize(raw, NUM)
        assert Fraction(canon) == Fraction(raw)
        assert not canon.startswith("+")
        digits = canon.lstrip("-")
        assert not (digits.startswith("0") and digits[1:2].isdigit())  # no leading zeros
        assert "." not in canon or not canon.endswith(("0", "."))  # no trailing zeros


def test_format_bounds():
    with pytest.raises(ValueError):
        AnswerFormat.multiple_choice(1)
    with pytest.raises(ValueError):
        AnswerFormat.multiple_choice(27)


def test_sentinel_invariant():
    with pytest.raises(ValueError):
        ExtractedAnswer(INVALID, True)
    with pytest.raises(ValueError):
        ExtractedAnswer("A", False)


formats = st.sampled_from([AnswerFormat.multiple_choice(k) for k in (2, 4, 10, 26)] + [NUM, TEXT])


@settings(max_examples=300, deadline=None)
@given(text=st.text(), fmt=formats)
def test_extract_total_and_deterministic(text, fmt):
    a = extract_answer(text, fmt)
    assert a == extract_answer(text, fmt)
    assert a.valid == (a.value != INVALID)
    if a.valid and fmt.kind is AnswerKind.MULTIPLE_CHOICE:
        assert len(a.value) == 1 and a.value in fmt.letters


@settings(max_examples=300, deadline=None)
@given(text=st.text(), fmt=formats)
def test_canonicalize_idempotent(text, fmt):
    once = canonicalize(text, fmt)
    assert canonicalize(once, fmt) == once
