"""Teacher-forced training of the report generator."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from drrg.corpus.vocab import BOS, EOS, PAD, Vocabulary
from drrg.errors import TrainingError
from drrg.generator.model import GeneratorModel
from drrg.numerics import Adam, save_tensors
from drrg.prior import PriorKnowledge

log = logging.getLogger(__name__)


@dataclass
class GenerationContext:
    sample_id: str
    image: np.ndarray  # (1, H, W)
    prior: PriorKnowledge
    max_output: int = 60


@dataclass(frozen=True)
class GenTrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    keep_checkpoints: int = 2


@dataclass
class TrainCurve:
    epoch_loss: list[float] = field(default_factory=list)
    step_loss: list[float] = field(default_factory=list)


def pad_batch(seqs, width: int | None = None) -> np.ndarray:
    width = max((len(s) for s in seqs), default=0) if width is None else width
    out = np.full((len(seqs), width), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s[:width]
    return out


def teacher_pair(ids: list[int], max_output: int) -> tuple[list[int], list[int]]:
    """Decoder input [BOS, t1..] and target [t1.., EOS], both at most max_output long."""
    ids = list(ids)[: max_output - 1]
    return [BOS] + ids, ids + [EOS]


def make_batch(contexts: list[GenerationContext], reports: list[list[int]] | None, max_output: int):
    images = np.stack([c.image for c in contexts]).astype(np.float64)
    know = pad_batch([c.prior.tokens for c in contexts])
    if reports is None:
        return images, know, None, None
    pairs = [teacher_pair(r, max_output) for r in reports]
    return images, know, pad_batch([p[0] for p in pairs]), pad_batch([p[1] for p in pairs])


def save_checkpoint(model: GeneratorModel, path) -> None:
    save_tensors(path, model.state_dict())


def train_generator(
    model: GeneratorModel,
    contexts: list[GenerationContext],
    reports: list[str],
    vocab: Vocabulary,
    config: GenTrainConfig | None = None,
    checkpoint_dir=None,
) -> TrainCurve:
    """Minimise the mean token negative log-likelihood of the mixed distribution."""
    config = config or GenTrainConfig()
    encoded = [vocab.encode(r) for r in reports]
    params = model.trainable_parameters()
    opt = Adam(params, config.lr, config.betas, config.eps)
    rng = np.random.default_rng(config.seed)
    curve = TrainCurve()
    n = len(contexts)
    saved: list[Path] = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for i in range(0, n, config.batch_size):
            idx = order[i : i + config.batch_size]
            images, know, inp, tgt = make_batch([contexts[j] for j in idx], [encoded[j] for j in idx],
                                                model.config.max_output)
            enc = model.encode(images, know)
            loss = model.loss(enc, inp, tgt)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingError(f"generator loss is not finite at step {len(curve.step_loss)}", epoch)
            loss.backward()
            # a batch without any prior never reaches the copy head
            for p in params:
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
            opt.step()
            model.zero_grad()
            curve.step_loss.append(value)
            total += value * len(idx)
            count += len(idx)
        curve.epoch_loss.append(total / count)
        log.info("generator epoch %d loss %.4f", epoch, curve.epoch_loss[-1])
        if checkpoint_dir is not None:
            path = Path(checkpoint_dir) / f"epoch{epoch:03d}.drrg"
            save_checkpoint(model, path)
            saved.append(path)
            while len(saved) > config.keep_checkpoints:
                saved.pop(0).unlink(missing_ok=True)
    return curve
