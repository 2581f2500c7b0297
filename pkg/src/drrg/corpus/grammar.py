"""Closed synthetic disease grammar: blob renderers plus sentence templates."""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from drrg.errors import ContractError
from drrg.text import tokenize

BLOB_KINDS = ("disc", "ring", "hbar", "vbar", "dots", "cross", "square", "diag")


@dataclass(frozen=True)
class Disease:
    name: str
    region: tuple[float, float, float, float]  # row0, row1, col0, col1 as image fractions
    kind: str
    radius: tuple[float, float]
    amplitude: tuple[float, float]
    keywords: tuple[tuple[str, ...], ...]
    templates: tuple[str, ...]


@dataclass(frozen=True)
class DiseaseGrammar:
    name: str
    diseases: tuple[Disease, ...]
    normal_sentences: tuple[str, ...]
    negation_cues: tuple[tuple[str, ...], ...]

    @property
    def n_classes(self) -> int:
        return len(self.diseases)

    def restrict(self, k: int) -> "DiseaseGrammar":
        """The first ``k`` diseases of this grammar."""
        if not 1 <= k <= len(self.diseases):
            raise ContractError(f"grammar {self.name!r} defines {len(self.diseases)} diseases, cannot use K={k}")
        return DiseaseGrammar(self.name, self.diseases[:k], self.normal_sentences, self.negation_cues)

    def validate(self) -> None:
        from drrg.corpus.labeler import _phrase_in

        for d in self.diseases:
            if d.kind not in BLOB_KINDS:
                raise ContractError(f"{d.name}: unknown blob kind {d.kind!r}")
            if len(d.templates) < 3:
                raise ContractError(f"{d.name}: needs at least 3 abnormal templates")
            for t in d.templates:
                toks = tokenize(t)
                if not any(_phrase_in(k, toks) for k in d.keywords):
                    raise ContractError(f"{d.name}: template {t!r} lacks a keyword")
        for s in self.normal_sentences:
            toks = tokenize(s)
            for d in self.diseases:
                if any(_phrase_in(k, toks) for k in d.keywords):
                    raise ContractError(f"normal sentence {s!r} contains a {d.name} keyword")


def _from_dict(raw: dict) -> DiseaseGrammar:
    diseases = tuple(
        Disease(
            name=d["name"],
            region=tuple(d["region"]),
            kind=d["blob"]["kind"],
            radius=tuple(d["blob"]["radius"]),
            amplitude=tuple(d["blob"]["amplitude"]),
            keywords=tuple(tuple(k) for k in d["keywords"]),
            templates=tuple(d["templates"]),
        )
        for d in raw["diseases"]
    )
    g = DiseaseGrammar(
        name=raw.get("name", "custom"),
        diseases=diseases,
        normal_sentences=tuple(raw["normal_sentences"]),
        negation_cues=tuple(tuple(c) for c in raw["negation_cues"]),
    )
    g.validate()
    return g


def load_grammar(source: str | Path = "grammar6", k: int | None = None) -> DiseaseGrammar:
    """Load a bundled grammar by name (``grammar6``, ``grammar14``) or a JSON file path."""
    path = Path(source)
    if path.suffix == ".json" and path.exists():
        raw = json.loads(path.read_text())
    else:
        try:
            raw = json.loads(resources.files("drrg.corpus").joinpath(f"data/{source}.json").read_text())
        except FileNotFoundError:
            raise ContractError(f"unknown grammar {source!r}") from None
    g = _from_dict(raw)
    return g if k is None else g.restrict(k)


# ---------------------------------------------------------------- rendering


def blob_mask(kind: str, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    """Soft [0, 1] footprint of one lesion centred at (cy, cx)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    dist = np.sqrt(dy * dy + dx * dx)
    if kind == "disc":
        m = dist <= r
    elif kind == "ring":
        m = (dist <= r) & (dist >= 0.55 * r)
    elif kind == "hbar":
        m = (np.abs(dy) <= 0.35 * r) & (np.abs(dx) <= r)
    elif kind == "vbar":
        m = (np.abs(dx) <= 0.35 * r) & (np.abs(dy) <= r)
    elif kind == "dots":
        m = (dist <= r) & ((yy % 2 == 0) & (xx % 2 == 0) | (dist <= 0.35 * r))
    elif kind == "cross":
        m = ((np.abs(dx) <= 0.25 * r) | (np.abs(dy) <= 0.25 * r)) & (np.maximum(np.abs(dx), np.abs(dy)) <= r)
    elif kind == "square":
        m = np.maximum(np.abs(dx), np.abs(dy)) <= 0.8 * r
    elif kind == "diag":
        m = (np.abs(dx - dy) <= 0.5 * r) & (dist <= r)
    else:
        raise ContractError(f"unknown blob kind {kind!r}")
    return m.astype(np.float64)


def blob_box(size: int, cy: float, cx: float, r: float) -> tuple[int, int, int, int]:
    """Integer bounding box (y0, y1, x0, x1), half-open, of a lesion footprint."""
    y0 = max(0, int(np.floor(cy - r)))
    y1 = min(size, int(np.ceil(cy + r)) + 1)
    x0 = max(0, int(np.floor(cx - r)))
    x1 = min(size, int(np.ceil(cx + r)) + 1)
    return y0, y1, x0, x1
