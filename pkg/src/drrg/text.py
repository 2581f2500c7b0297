"""Tokenisation and sentence splitting shared by the labeler, vocab and metrics."""

from __future__ import annotations

import re

_TOKEN = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")
# a comma followed by a capitalised word is a spliced sentence boundary
_SENT_END = re.compile(r"[.!?]|,(?=\s*[A-Z])")
_PUNCT = set(".,;:!?")


def tokenize(text: str) -> list[str]:
    """Lowercase; words are alphanumeric runs, every other visible char is a token."""
    return _TOKEN.findall(text.lower())


def split_sentences(report: str) -> list[str]:
    """Split on '.', '!', '?' (and comma splices); strip whitespace; drop empties."""
    return [" ".join(s.split()) for s in _SENT_END.split(report) if s.strip()]


def detokenize(tokens: list[str]) -> str:
    """Join with spaces, glue punctuation left, capitalise each sentence."""
    out: list[str] = []
    cap = True
    for tok in tokens:
        if tok in _PUNCT:
            if out:
                out[-1] += tok
            else:
                out.append(tok)
            if tok in ".!?":
                cap = True
            continue
        out.append(tok[:1].upper() + tok[1:] if cap else tok)
        cap = False
    return " ".join(out)
