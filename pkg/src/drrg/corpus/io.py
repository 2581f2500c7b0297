"""JSON-lines corpus files: one sample per line, images as base64 float32."""

from __future__ import annotations

import base64
import json
from pathlib import Path

import numpy as np

from drrg.corpus.generate import Lesion, Sample
from drrg.errors import ArtifactIOError


def sample_to_record(s: Sample) -> dict:
    img = np.ascontiguousarray(s.image[0], dtype="<f4")
    return {
        "id": s.id,
        "image": base64.b64encode(img.tobytes()).decode("ascii"),
        "shape": list(img.shape),
        "report": s.report,
        "labels": [int(b) for b in s.labels],
        "lesions": [[l.label, l.cy, l.cx, l.radius] for l in s.lesions],
    }


def record_to_sample(rec: dict) -> Sample:
    raw = base64.b64decode(rec["image"])
    if "shape" in rec:
        h, w = rec["shape"]
    else:
        h = w = int(round(np.sqrt(len(raw) // 4)))
    img = np.frombuffer(raw, dtype="<f4").reshape(h, w).astype(np.float64)
    lesions = [Lesion(int(a), float(b), float(c), float(d)) for a, b, c, d in rec.get("lesions", [])]
    return Sample(rec["id"], img[None], rec["report"], np.array(rec["labels"], dtype=bool), lesions)


def save_corpus(path, corpus) -> None:
    lines = [json.dumps(sample_to_record(s), sort_keys=True) for s in corpus]
    try:
        Path(path).write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise ArtifactIOError(f"cannot write corpus {path}: {exc}") from exc


def load_corpus(path) -> list[Sample]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ArtifactIOError(f"cannot read corpus {path}: {exc}") from exc
    return [record_to_sample(json.loads(line)) for line in text.splitlines() if line.strip()]
