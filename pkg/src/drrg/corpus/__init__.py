"""Synthetic image/report corpus and the rule labeler standing in for CheXbert."""

from drrg.corpus.generate import CorpusConfig, Lesion, Sample, generate_corpus
from drrg.corpus.grammar import DiseaseGrammar, load_grammar
from drrg.corpus.io import load_corpus, save_corpus
from drrg.corpus.labeler import Labeler, default_labeler, extract_labels, label_sentence
from drrg.corpus.vocab import BOS, EOS, PAD, SEP, UNK, Vocabulary, build_vocab

__all__ = [
    "BOS",
    "EOS",
    "PAD",
    "SEP",
    "UNK",
    "CorpusConfig",
    "DiseaseGrammar",
    "Labeler",
    "Lesion",
    "Sample",
    "Vocabulary",
    "build_vocab",
    "default_labeler",
    "extract_labels",
    "generate_corpus",
    "label_sentence",
    "load_corpus",
    "load_grammar",
    "save_corpus",
]
