"""GAP classifier, class activation maps and disease-oriented masks.

The classifier ends in global-average-pool followed by a single linear map,
which is what makes the class activation map an exact spatial decomposition
of the class logit::

    logit_c = b_c + mean_{x,y} sum_k W[c, k] f_k(x, y)
    cam_c(x, y) = sum_k W[c, k] f_k(x, y)
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from drrg.errors import ArtifactIOError, ContractError, TrainingError
from drrg.numerics import Adam, Tensor, no_grad
from drrg.numerics import functional as F
from drrg.numerics._kernels import bilinear_upsample
from drrg.numerics.nn import Linear, Module, param, zeros

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 5e-3
    seed: int = 0
    channels: tuple[int, int, int] = (16, 32, 64)


class ClassifierModel(Module):
    """Three stride-2 conv+relu layers, global average pool, linear head."""

    def __init__(self, n_classes: int, channels=(16, 32, 64), seed: int = 0):
        rng = np.random.default_rng(seed)
        c_in = 1
        self.convs = []
        for i, c in enumerate(channels):
            conv = Module()
            conv.weight = param(rng, (c, c_in, 3, 3), np.sqrt(2.0 / (c_in * 9)))
            conv.bias = zeros((c,))
            self.convs.append(conv)
            c_in = c
        self.head = Linear(rng, c_in, n_classes)
        # per-class normaliser for CAMs, set by calibrate(); None means per-map min-max
        self.cam_scale: np.ndarray | None = None
        self.curve: list[float] = []

    @property
    def n_classes(self) -> int:
        return self.head.weight.shape[1]

    @property
    def class_weights(self) -> np.ndarray:
        """W of shape (K, C_feat): W[c, k] is the weight of unit k for class c."""
        return self.head.weight.data.T

    def features(self, images: Tensor) -> Tensor:
        d = images.data
        # per-image standardisation removes global exposure differences
        mu = d.mean(axis=(1, 2, 3), keepdims=True)
        sd = d.std(axis=(1, 2, 3), keepdims=True)
        x = Tensor((d - mu) / np.maximum(sd, 1e-6))
        for conv in self.convs:
            x = F.relu(F.conv2d(x, conv.weight, conv.bias, stride=2, pad=1))
        return x

    def logits(self, images: Tensor) -> Tensor:
        return self.head(F.global_avg_pool(self.features(images)))

    def predict_proba(self, images: np.ndarray, batch: int = 64) -> np.ndarray:
        out = []
        with no_grad():
            for i in range(0, len(images), batch):
                out.append(F.sigmoid(self.logits(Tensor(images[i : i + batch]))).data)
        return np.concatenate(out)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = super().state_dict()
        if self.cam_scale is not None:
            state["cam_scale"] = self.cam_scale.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        super().load_state_dict(state)
        self.cam_scale = state.get("cam_scale")

    @classmethod
    def from_state(cls, state: dict[str, np.ndarray]) -> "ClassifierModel":
        channels = tuple(state[f"convs.{i}.weight"].shape[0] for i in range(3))
        model = cls(state["head.weight"].shape[1], channels)
        model.load_state_dict(state)
        return model


def _stack_images(corpus) -> np.ndarray:
    return np.stack([s.image for s in corpus]).astype(np.float64)


def train_classifier(corpus, config: TrainConfig | None = None) -> ClassifierModel:
    """Multi-label training with per-class sigmoid cross-entropy."""
    config = config or TrainConfig()
    if not corpus:
        raise ContractError("cannot train a classifier on an empty corpus")
    images = _stack_images(corpus)
    labels = np.stack([s.labels for s in corpus]).astype(np.float64)
    model = ClassifierModel(labels.shape[1], config.channels, seed=config.seed)
    opt = Adam(model.parameters(), config.lr)
    rng = np.random.default_rng(config.seed)
    n = len(images)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for i in range(0, n, config.batch_size):
            idx = order[i : i + config.batch_size]
            loss = F.bce_with_logits(model.logits(Tensor(images[idx])), labels[idx])
            if not np.isfinite(loss.data):
                raise TrainingError("classifier loss is not finite", epoch)
            loss.backward()
            opt.step()
            total += float(loss.data) * len(idx)
        model.curve.append(total / n)
        log.info("classifier epoch %d loss %.4f", epoch, model.curve[-1])
    calibrate(model, images)
    return model


# -------------------------------------------------------------------- CAMs


@dataclass
class ClassActivationMap:
    class_index: int
    raw: np.ndarray  # (h, w) unclamped sum_k W[c,k] f_k
    values: np.ndarray  # (h, w) clamped and normalised
    upsampled: np.ndarray  # (H, W) clamped, upsampled, normalised


def _normalise(m: np.ndarray, scale: float | None) -> np.ndarray:
    lo = m.min()
    span = (m.max() - lo) if scale is None else scale
    if span <= 0 or m.max() - lo <= 0:
        return np.zeros_like(m)
    return np.clip((m - lo) / span, 0.0, 1.0)


def cam_from_features(
    features: np.ndarray,
    class_weights: np.ndarray,
    class_index: int,
    out_size: tuple[int, int],
    scale: float | None = None,
) -> ClassActivationMap:
    """CAM for one class from (C, h, w) features and (K, C) weights."""
    if not 0 <= class_index < class_weights.shape[0]:
        raise ContractError(f"class index {class_index} outside [0, {class_weights.shape[0]})")
    raw = np.tensordot(class_weights[class_index], features, axes=(0, 0))
    clamped = np.maximum(raw, 0.0)
    up = np.maximum(bilinear_upsample(clamped, *out_size), 0.0)
    feat_scale = None
    if scale is not None and clamped.max() > 0:
        # keep the feature-resolution map on the same scale as the upsampled one
        feat_scale = scale * (clamped.max() - clamped.min()) / max(up.max() - up.min(), 1e-300)
    return ClassActivationMap(class_index, raw, _normalise(clamped, feat_scale), _normalise(up, scale))


def compute_cam(model: ClassifierModel, image: np.ndarray, class_index: int) -> ClassActivationMap:
    if not 0 <= class_index < model.n_classes:
        raise ContractError(f"class index {class_index} outside [0, {model.n_classes})")
    with no_grad():
        feats = model.features(Tensor(image[None])).data[0]
    scale = None if model.cam_scale is None else float(model.cam_scale[class_index])
    return cam_from_features(feats, model.class_weights, class_index, image.shape[-2:], scale)


def _features(model: ClassifierModel, images: np.ndarray, batch: int = 64) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(images), batch):
            out.append(model.features(Tensor(images[i : i + batch])).data)
    return np.concatenate(out)


def _raw_maps(model: ClassifierModel, images: np.ndarray) -> np.ndarray:
    # (N, K, H, W) clamped upsampled maps, before normalisation
    feats = _features(model, images)
    size = images.shape[-2:]
    w = model.class_weights
    return np.stack(
        [[np.maximum(bilinear_upsample(np.maximum(np.tensordot(w[c], f, axes=(0, 0)), 0.0), *size), 0.0)
          for c in range(w.shape[0])] for f in feats]
    )


def calibrate(model: ClassifierModel, images: np.ndarray) -> None:
    """Fix per-class CAM scales to the largest map range seen on ``images``.

    With a shared scale, maps of absent diseases stay near zero instead of
    being stretched to [0, 1] image by image.
    """
    maps = _raw_maps(model, images)
    span = maps.max(axis=(2, 3)) - maps.min(axis=(2, 3))
    model.cam_scale = np.maximum(span.max(axis=0), 1e-12)


# --------------------------------------------------------------------- DOMs


@dataclass
class DiseaseOrientedMask:
    sample_id: str
    raw: np.ndarray  # (H, W, K)
    compressed: np.ndarray  # (H, W, 3)


def truncated_svd(m: np.ndarray, rank: int):
    """Top-``rank`` SVD with each left singular vector's largest-|entry| made positive."""
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    u, s, vt = u[:, :rank].copy(), s[:rank].copy(), vt[:rank].copy()
    for i in range(rank):
        j = np.argmax(np.abs(u[:, i]))
        if u[j, i] < 0:
            u[:, i] *= -1
            vt[i] *= -1
    return u, s, vt


def compress_dom(raw: np.ndarray, rank: int = 3) -> np.ndarray:
    """Project the K disease channels of an (H, W, K) stack onto its top-3 components."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 3:
        raise ContractError(f"expected an (H, W, K) mask, got shape {raw.shape}")
    h, w, k = raw.shape
    if k < rank:
        raise ContractError(f"K={k} < {rank}: nothing to compress, configure identity pass-through instead")
    u, s, _ = truncated_svd(raw.reshape(h * w, k), rank)
    return (u * s).reshape(h, w, rank)


def build_dom(model: ClassifierModel, image: np.ndarray, sample_id: str = "") -> DiseaseOrientedMask:
    raw = np.stack([compute_cam(model, image, c).upsampled for c in range(model.n_classes)], axis=-1)
    return DiseaseOrientedMask(sample_id, raw, compress_dom(raw))


def build_doms(model: ClassifierModel, corpus) -> list[DiseaseOrientedMask]:
    """build_dom over a corpus with batched feature extraction."""
    images = _stack_images(corpus)
    feats = _features(model, images)
    out = []
    for s, f in zip(corpus, feats):
        chans = []
        for c in range(model.n_classes):
            scale = None if model.cam_scale is None else float(model.cam_scale[c])
            chans.append(cam_from_features(f, model.class_weights, c, images.shape[-2:], scale).upsampled)
        raw = np.stack(chans, axis=-1)
        out.append(DiseaseOrientedMask(s.id, raw, compress_dom(raw)))
    return out


# -------------------------------------------------------------- pool files

POOL_MAGIC = b"DOMP"
POOL_VERSION = 1


def save_pool(path, entries: list[tuple[str, np.ndarray]]) -> None:
    """Write (id, (H, W, C) mask) pairs as a DOMP file, payload float32 LE."""
    parts = [POOL_MAGIC, struct.pack("<IQ", POOL_VERSION, len(entries))]
    for sid, arr in entries:
        arr = np.ascontiguousarray(arr, dtype="<f4")
        if arr.ndim != 3:
            raise ContractError(f"pool entry {sid!r} must be (H, W, C), got {arr.shape}")
        raw = sid.encode("utf-8")
        parts += [struct.pack("<I", len(raw)), raw, struct.pack("<III", *arr.shape), arr.tobytes()]
    try:
        Path(path).write_bytes(b"".join(parts))
    except OSError as exc:
        raise ArtifactIOError(f"cannot write DOM pool {path}: {exc}") from exc


def load_pool(path) -> list[tuple[str, np.ndarray]]:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise ArtifactIOError(f"cannot read DOM pool {path}: {exc}") from exc
    if buf[:4] != POOL_MAGIC:
        raise ContractError(f"{path} is not a DOM pool file")
    version, count = struct.unpack_from("<IQ", buf, 4)
    if version != POOL_VERSION:
        raise ContractError(f"unsupported DOM pool version {version}")
    off = 16
    out = []
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        sid = buf[off : off + n].decode("utf-8")
        off += n
        h, w, c = struct.unpack_from("<III", buf, off)
        off += 12
        arr = np.frombuffer(buf, dtype="<f4", count=h * w * c, offset=off).reshape(h, w, c).copy()
        off += 4 * h * w * c
        out.append((sid, arr))
    return out


def build_dom_pool(model: ClassifierModel, corpus, path) -> list[tuple[str, np.ndarray]]:
    """Compressed DOM per sample, in corpus order, persisted to ``path``."""
    entries = [(d.sample_id, d.compressed.astype(np.float32)) for d in build_doms(model, corpus)]
    save_pool(path, entries)
    return entries


# -------------------------------------------------------------- evaluation


def localization_ratio(cam: np.ndarray, box, rng: np.random.Generator, n_random: int = 20) -> float:
    """CAM mass inside ``box`` over the largest mass in equal-size disjoint boxes.

    Random boxes are drawn uniformly among positions that do not intersect
    the ground-truth box. Returns inf when every random box has zero mass.
    """
    y0, y1, x0, x1 = box
    bh, bw = y1 - y0, x1 - x0
    h, w = cam.shape
    inside = cam[y0:y1, x0:x1].sum()
    cands = [
        (yy, xx)
        for yy in range(h - bh + 1)
        for xx in range(w - bw + 1)
        if yy + bh <= y0 or yy >= y1 or xx + bw <= x0 or xx >= x1
    ]
    if not cands:
        raise ContractError("no disjoint equal-area region fits in the image")
    pick = rng.choice(len(cands), size=min(n_random, len(cands)), replace=False)
    best = max(cam[cands[i][0] : cands[i][0] + bh, cands[i][1] : cands[i][1] + bw].sum() for i in pick)
    if best <= 0:
        return float("inf") if inside > 0 else 0.0
    return float(inside / best)
