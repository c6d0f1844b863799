"""Post-filters for distilled reasoning traces.

Three gates: the mandated think/answer template, a minimum word count
for the reasoning region, and an n-gram repetition flag that catches
templated or looping chains of thought.  Tokenization is plain Unicode
whitespace splitting with no normalization; repeated windows are found
via a rolling hash with exact verification on collisions, and
overlapping occurrences count.
"""

from __future__ import annotations

import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field

from .errors import InvalidInputError

DEFAULT_MIN_WORDS = 100
DEFAULT_NGRAM = 50
DEFAULT_MIN_REPEATS = 3

_RK_BASE = 1_000_003
_RK_MOD = (1 << 61) - 1


@dataclass(frozen=True)
class FilterFailure:
    rule: str  # template | length | ngram
    detail: str


@dataclass(frozen=True)
class FilterVerdict:
    passed: bool
    failures: tuple[FilterFailure, ...] = field(default=())

    @staticmethod
    def from_failures(failures: list[FilterFailure]) -> "FilterVerdict":
        return FilterVerdict(passed=not failures, failures=tuple(failures))


def think_region(text: str) -> str | None:
    """Content of the first think region; None when the template is broken."""
    m = re.search(r"<think>(.*?)</think>", text, re.DOTALL)
    return m.group(1) if m else None


def validate_template(text: str) -> FilterVerdict:
    """Exactly one well-nested think region, then at least one answer region."""
    opens = text.count("<think>")
    closes = text.count("</think>")
    failures: list[FilterFailure] = []
    if opens != 1 or closes != 1:
        failures.append(
            FilterFailure("template", f"expected exactly one think region ({opens} opens, {closes} closes)")
        )
    elif text.index("<think>") > text.index("</think>"):
        failures.append(FilterFailure("template", "think tags out of order"))
    else:
        after = text[text.index("</think>") + len("</think>") :]
        if not re.search(r"<answer>.*?</answer>", after, re.DOTALL):
            failures.append(FilterFailure("template", "no answer region after the think region"))
    return FilterVerdict.from_failures(failures)


def validate_length(text: str, min_words: int = DEFAULT_MIN_WORDS) -> FilterVerdict:
    """Word count of the think-region content must reach min_words (inclusive)."""
    region = think_region(text)
    if region is None:
        return FilterVerdict.from_failures([FilterFailure("length", "no think region to measure")])
    words = len(region.split())
    if words < min_words:
        return FilterVerdict.from_failures(
            [FilterFailure("length", f"think region has {words} words < {min_words}")]
        )
    return FilterVerdict(passed=True)


def _rolling_hashes(ids: list[int], n: int) -> list[int]:
    high = pow(_RK_BASE, n - 1, _RK_MOD)
    current = 0
    for value in ids[:n]:
        current = (current * _RK_BASE + value) % _RK_MOD
    hashes = [current]
    for i in range(n, len(ids)):
        current = ((current - ids[i - n] * high) * _RK_BASE + ids[i]) % _RK_MOD
        hashes.append(current)
    return hashes


def find_repeated_window(tokens: list[str], n: int, min_repeats: int) -> tuple[int, int] | None:
    """(first start index, multiplicity) of a window repeating >= min_repeats, else None.

    Hash buckets are verified with exact tuple comparison, so collisions
    never produce a false flag.
    """
    if n < 1:
        raise InvalidInputError("n-gram size must be >= 1")
    if len(tokens) < n:
        return None
    interned: dict[str, int] = {}
    ids = [interned.setdefault(tok, len(interned) + 1) for tok in tokens]
    buckets: dict[int, list[int]] = defaultdict(list)
    for start, h in enumerate(_rolling_hashes(ids, n)):
        buckets[h].append(start)
    best: tuple[int, int] | None = None
    for starts in buckets.values():
        if len(starts) < min_repeats:
            continue
        groups: dict[tuple[str, ...], list[int]] = defaultdict(list)
        for s in starts:
            groups[tuple(tokens[s : s + n])].append(s)
        for positions in groups.values():
            if len(positions) >= min_repeats:
                candidate = (positions[0], len(positions))
                if best is None or candidate[0] < best[0]:
                    best = candidate
    return best


def ngram_repetition_flag(
    text: str, n: int = DEFAULT_NGRAM, min_repeats: int = DEFAULT_MIN_REPEATS
) -> bool:
    """True when any contiguous n-token window occurs at least min_repeats times."""
    return find_repeated_window(text.split(), n, min_repeats) is not None


def filter_trace(
    text: str,
    min_words: int = DEFAULT_MIN_WORDS,
    ngram_n: int = DEFAULT_NGRAM,
    min_repeats: int = DEFAULT_MIN_REPEATS,
) -> FilterVerdict:
    """Conjunction of the template, length and repetition gates."""
    failures = list(validate_template(text).failures)
    failures.extend(validate_length(text, min_words).failures)
    tokens = text.split()
    hit = find_repeated_window(tokens, ngram_n, min_repeats)
    if hit is not None:
        start, count = hit
        preview = " ".join(tokens[start : start + min(ngram_n, 8)])
        failures.append(
            FilterFailure("ngram", f"{ngram_n}-gram at token {start} repeats {count}x: {preview!r}...")
        )
    return FilterVerdict.from_failures(failures)


def rejection_histogram(verdicts: list[FilterVerdict]) -> dict[str, int]:
    counts: Counter[str] = Counter()
    for verdict in verdicts:
        for failure in verdict.failures:
            counts[failure.rule] += 1
    return dict(sorted(counts.items()))
