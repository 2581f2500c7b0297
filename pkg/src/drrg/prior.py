"""Prior knowledge: the abnormal sentences of retrieved reference reports."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from drrg.corpus.labeler import default_labeler
from drrg.corpus.vocab import SEP, Vocabulary
from drrg.text import split_sentences

__all__ = ["PriorKnowledge", "PriorSentence", "extract_prior", "split_sentences"]


@dataclass(frozen=True)
class PriorSentence:
    text: str
    source_id: str
    labels: np.ndarray


@dataclass
class PriorKnowledge:
    sentences: list[PriorSentence] = field(default_factory=list)
    tokens: list[int] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return not self.tokens

    def texts(self) -> list[str]:
        return [s.text for s in self.sentences]


def extract_prior(reports, vocab: Vocabulary, labeler=None, cap: int = 100) -> PriorKnowledge:
    """Collect abnormal sentences from ``reports`` (rank-ordered (id, text) pairs).

    Sentences are kept in (rank, position) order and joined with a separator
    token. The token sequence is cut at ``cap``; a sentence cut part-way keeps
    its leading tokens.
    """
    labeler = labeler or default_labeler()
    out = PriorKnowledge()
    for sid, text in reports:
        for sent in split_sentences(text):
            bits = labeler.label_sentence(sent)
            if not bits.any():
                continue
            room = cap - len(out.tokens) - (1 if out.tokens else 0)
            if room <= 0:
                return out
            if out.tokens:
                out.tokens.append(SEP)
            out.tokens.extend(vocab.encode(sent)[:room])
            out.sentences.append(PriorSentence(sent, sid, bits))
    return out
