from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass

from drrg.errors import ContractError
from drrg.text import detokenize, tokenize

PAD, BOS, EOS, UNK, SEP = 0, 1, 2, 3, 4
SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>", "<sep>")


@dataclass
class Vocabulary:
    tokens: list[str]

    def __post_init__(self):
        self._index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def id(self, token: str) -> int:
        return self._index.get(token, UNK)

    def encode(self, text: str) -> list[int]:
        return [self.id(t) for t in tokenize(text)]

    def decode_tokens(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids if i not in (PAD, BOS, EOS, SEP)]

    def decode(self, ids) -> str:
        return detokenize(self.decode_tokens(ids))

    def to_json(self) -> str:
        return json.dumps({"tokens": self.tokens})

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        tokens = json.loads(text)["tokens"]
        if tuple(tokens[: len(SPECIALS)]) != SPECIALS:
            raise ContractError("vocabulary does not start with the special tokens")
        return cls(tokens)


def build_vocab(corpus, min_freq: int = 1) -> Vocabulary:
    """Specials at ids 0-4, then every token seen at least ``min_freq`` times, sorted."""
    if not corpus:
        raise ContractError("cannot build a vocabulary from an empty corpus")
    counts = Counter()
    for sample in corpus:
        counts.update(tokenize(sample if isinstance(sample, str) else sample.report))
    kept = sorted(t for t, c in counts.items() if c >= min_freq and t not in SPECIALS)
    return Vocabulary(list(SPECIALS) + kept)
