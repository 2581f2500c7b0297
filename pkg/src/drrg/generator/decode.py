"""Greedy decoding with optional per-step diagnostics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from drrg.corpus.vocab import BOS, EOS, Vocabulary
from drrg.generator.model import GeneratorModel
from drrg.generator.train import GenerationContext, make_batch
from drrg.numerics import no_grad


@dataclass
class StepTrace:
    step: int
    token: int
    gen_argmax: int
    copy_argmax: int | None
    copy_mass: float  # share of y at the emitted token that came from the copy term


@dataclass
class Generation:
    sample_id: str
    ids: list[int]
    text: str
    trace: list[StepTrace]


def step(model: GeneratorModel, prefix: list[int], context: GenerationContext):
    """(y, y_gen, y_copy) for the next token after ``prefix``."""
    images, know, _, _ = make_batch([context], None, model.config.max_output)
    with no_grad():
        enc = model.encode(images, know)
        y, y_gen, y_copy = model.distributions(enc, np.asarray([prefix]), last_only=True)
    return y[0, -1], y_gen[0, -1], y_copy[0, -1]


def generate(model: GeneratorModel, contexts: list[GenerationContext], vocab: Vocabulary,
             batch_size: int = 32, trace: bool = False) -> list[Generation]:
    """Greedy argmax decoding from BOS until EOS or the output cap.

    np.argmax returns the first maximum, so ties go to the lowest token id.
    """
    cap = model.config.max_output
    out: list[Generation] = []
    for i in range(0, len(contexts), batch_size):
        chunk = contexts[i : i + batch_size]
        images, know, _, _ = make_batch(chunk, None, cap)
        b = len(chunk)
        prefix = np.full((b, 1), BOS, dtype=np.int64)
        done = np.zeros(b, dtype=bool)
        emitted: list[list[int]] = [[] for _ in range(b)]
        traces: list[list[StepTrace]] = [[] for _ in range(b)]
        with no_grad():
            enc = model.encode(images, know)
            lam = model.mix_weight(enc)
            for t in range(cap):
                y, y_gen, y_copy = model.distributions(enc, prefix, last_only=True)
                y, y_gen, y_copy = y[:, -1], y_gen[:, -1], y_copy[:, -1]
                nxt = y.argmax(axis=1)
                for j in np.flatnonzero(~done):
                    tok = int(nxt[j])
                    if trace:
                        mass = lam[j] * y_copy[j, tok] / y[j, tok] if y[j, tok] > 0 else 0.0
                        traces[j].append(StepTrace(t, tok, int(y_gen[j].argmax()),
                                                   int(y_copy[j].argmax()) if lam[j] > 0 else None, float(mass)))
                    if tok == EOS:
                        done[j] = True
                    else:
                        emitted[j].append(tok)
                if done.all() or prefix.shape[1] >= cap:
                    break
                prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
        for c, ids, tr in zip(chunk, emitted, traces):
            out.append(Generation(c.sample_id, ids, vocab.decode(ids), tr))
    return out
