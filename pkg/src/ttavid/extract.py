"""Answer extraction from free-form generated text.

The cascade is: last ``\\boxed{...}``, then the last ``Answer: X`` /
``The answer is X`` tag, then (multiple choice only) the last standalone
option letter. The first rule that fires decides; a captured token that
fails validation yields ``INVALID`` rather than falling through.
"""

from __future__ import annotations

import enum
import re
import string
from dataclasses import dataclass
from decimal import Decimal, InvalidOperation

INVALID = "INVALID"

_LETTERS = string.ascii_uppercase
_STRIP_CHARS = string.whitespace + string.punctuation


class AnswerKind(str, enum.Enum):
    MULTIPLE_CHOICE = "mc"
    NUMERIC = "numeric"
    FREE_TEXT = "text"


@dataclass(frozen=True)
class AnswerFormat:
    kind: AnswerKind = AnswerKind.MULTIPLE_CHOICE
    option_count: int = 4

    def __post_init__(self):
        object.__setattr__(self, "kind", AnswerKind(self.kind))
        if self.kind is AnswerKind.MULTIPLE_CHOICE and not 2 <= self.option_count <= 26:
            raise ValueError(f"option_count must be in [2, 26], got {self.option_count}")

    @classmethod
    def multiple_choice(cls, option_count: int) -> "AnswerFormat":
        return cls(AnswerKind.MULTIPLE_CHOICE, option_count)

    @property
    def letters(self) -> str:
        return _LETTERS[: self.option_count]

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "option_count": self.option_count}

    @classmethod
    def from_dict(cls, d: dict) -> "AnswerFormat":
        return cls(AnswerKind(d["kind"]), int(d.get("option_count", 4)))


@dataclass(frozen=True)
class ExtractedAnswer:
    value: str
    valid: bool

    def __post_init__(self):
        if self.valid == (self.value == INVALID):
            raise ValueError("valid must be False exactly when value is INVALID")

    @classmethod
    def invalid(cls) -> "ExtractedAnswer":
        return cls(INVALID, False)

    @classmethod
    def of(cls, value: str) -> "ExtractedAnswer":
        return cls(value, value != INVALID)


_BOXED = re.compile(r"\\boxed\{([^{}]*)\}")
_TAG = re.compile(r"(?i)(?:\banswer\s*(?:is)?\s*:|\bthe\s+answer\s+is\b)[ \t]*([^\n]*)")


def _canonical_number(token: str) -> str:
    token = token.strip().replace(",", "")
    token = token.rstrip(".")  # sentence-final period, "42."
    try:
        d = Decimal(token)
    except InvalidOperation:
        return INVALID
    if not d.is_finite():
        return INVALID
    if d == 0:
        return "0"
    d = d.normalize()
    return format(d, "f")


def canonicalize(value: str, fmt: AnswerFormat) -> str:
    """Canonical token for ``value`` under ``fmt``, or ``INVALID``."""
    if value == INVALID:
        return INVALID
    if fmt.kind is AnswerKind.MULTIPLE_CHOICE:
        token = value.strip(_STRIP_CHARS).upper()
        if len(token) == 1 and token in fmt.letters:
            return token
        return INVALID
    if fmt.kind is AnswerKind.NUMERIC:
        token = value.strip().strip("$").strip()
        return _canonical_number(token)
    text = " ".join(value.lower().split())
    text = text.rstrip(string.punctuation + " ").strip()
    return text if text else INVALID


def _tag_token(captured: str, fmt: AnswerFormat) -> str:
    # Tag lines often continue with an explanation ("The answer is (B) because ...").
    if fmt.kind is AnswerKind.MULTIPLE_CHOICE:
        m = re.match(r"\s*[\(\[]?\s*([A-Za-z])\s*[\)\]]?(?![A-Za-z])", captured)
        return m.group(1) if m else captured
    if fmt.kind is AnswerKind.NUMERIC:
        m = re.match(r"\s*\$?\s*([-+]?(?:\d[\d,]*(?:\.\d*)?|\.\d+)(?:[eE][-+]?\d+)?)", captured)
        return m.group(1) if m else captured
    return captured


def _option_letter_pattern(fmt: AnswerFormat) -> re.Pattern:
    letters = re.escape(fmt.letters)
    return re.compile(rf"(?<![A-Za-z0-9])\(?([{letters}])(?:[.)]|[ \t]*$)", re.MULTILINE)


def extract_answer(text: str, fmt: AnswerFormat) -> ExtractedAnswer:
    """Parse the final answer out of ``text``; never raises."""
    if not text:
        return ExtractedAnswer.invalid()

    boxed = _BOXED.findall(text)
    if boxed:
        return ExtractedAnswer.of(canonicalize(boxed[-1], fmt))

    tags = _TAG.findall(text)
    if tags:
        return ExtractedAnswer.of(canonicalize(_tag_token(tags[-1], fmt), fmt))

    if fmt.kind is AnswerKind.MULTIPLE_CHOICE:
        letters = _option_letter_pattern(fmt).findall(text)
        if letters:
            return ExtractedAnswer.of(canonicalize(letters[-1], fmt))

    return ExtractedAnswer.invalid()
