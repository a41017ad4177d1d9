from __future__ import annotations

import unicodedata
from collections.abc import Iterable

try:
    from rapidfuzz import fuzz
except ImportError:
    # Without RapidFuzz we only suggest exact (normalised) matches.
    fuzz = None  # type: ignore[assignment]


def _normalise(text: str) -> str:
    """Lowercase, strip accents, unify separators."""
    text = text.strip().lower().replace("-", "_")
    text = unicodedata.normalize("NFKD", text)
    return "".join(ch for ch in text if not unicodedata.combining(ch))


def _score(a: str, b: str) -> float:
    if not a or not b:
        return 0.0
    if fuzz is not None:
        # RapidFuzz ratio is 0–100
        return float(fuzz.ratio(a, b))
    return 100.0 if a == b else 0.0


def closest(name: str, choices: Iterable[str], *, min_score: float = 60.0) -> str | None:
    """Best fuzzy match for a mistyped flag or method name, or None."""
    key = _normalise(name)
    best: str | None = None
    best_score = 0.0
    for choice in choices:
        s = _score(key, _normalise(choice))
        if s > best_score:
            best, best_score = choice, s
    return best if best_score >= min_score else None


def unknown_choice_message(kind: str, name: str, choices: Iterable[str]) -> str:
    options = list(choices)
    msg = f"unknown {kind} {name!r}"
    hint = closest(name, options)
    if hint is not None:
        msg += f"; did you mean {hint!r}?"
    else:
        msg += f"; expected one of {', '.join(options)}"
    return msg
