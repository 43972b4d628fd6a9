"""The framework tokenizer.

Text is split on Unicode whitespace, then each leading or trailing
punctuation character (Unicode category P*) becomes a token of its own::

    >>> tokenize("intubated and sedated.")
    ['intubated', 'and', 'sedated', '.']

Joining tokens with single spaces is the canonical inverse used for chunk
text, and ``tokenize(detokenize(tokenize(s))) == tokenize(s)`` for all ``s``.
Chunk sizes, token budgets and ROUGE all count these tokens, not a model's
subword tokens.
"""

from __future__ import annotations

import unicodedata


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def tokenize(text: str) -> list[str]:
    out: list[str] = []
    for word in text.split():
        start, end = 0, len(word)
        while start < end and _is_punct(word[start]):
            start += 1
        if start == end:
            out.extend(word)
            continue
        while _is_punct(word[end - 1]):
            end -= 1
        out.extend(word[:start])
        out.append(word[start:end])
        out.extend(word[end:])
    return out


def detokenize(tokens: list[str]) -> str:
    return " ".join(tokens)


def estimate_tokens(text: str) -> int:
    return len(tokenize(text))
