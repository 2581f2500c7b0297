"""Multimodal encoder and fact-consistent decoder.

Image patches and prior-knowledge tokens are encoded by two separate
pre-norm transformer stacks. The causal decoder cross-attends to both. Its
final hidden state ``d_i`` drives two additive-attention heads::

    u_j = v^T tanh(W1 s_j + W2 d_i),   a = softmax(u)

Over image states, ``d'_i = sum_j a_j e_j`` and the generation distribution
is ``softmax(Linear([d'_i; d_i]))``. Over knowledge states, the attention
weights are scattered onto the vocabulary ids of the prior tokens to give
the copy distribution. The output is their plain average when a prior is
present, and the generation distribution alone when it is empty.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from drrg.corpus.vocab import PAD, SEP
from drrg.errors import ContractError
from drrg.numerics import Tensor, concat
from drrg.numerics import functional as F
from drrg.numerics.nn import LayerNorm, Linear, Module, param


@dataclass(frozen=True)
class GeneratorConfig:
    vocab_size: int
    image_size: int = 64
    patch: int = 8
    d_model: int = 128
    n_heads: int = 8
    n_layers: int = 3
    ff_mult: int = 2
    attn_dim: int = 64
    max_output: int = 60
    max_knowledge: int = 100
    use_copy: bool = True
    seed: int = 0

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        if self.image_size % self.patch:
            raise ContractError(f"patch size {self.patch} does not tile image size {self.image_size}")
        if self.d_model % self.n_heads:
            raise ContractError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")
        for name in ("vocab_size", "d_model", "n_heads", "n_layers", "attn_dim", "max_output"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")


def sinusoid(positions: np.ndarray, dim: int) -> np.ndarray:
    pos = np.asarray(positions, dtype=np.float64)[..., None]
    freq = np.exp(-np.log(10000.0) * (np.arange(0, dim, 2) / dim))
    out = np.zeros(pos.shape[:-1] + (dim,))
    out[..., 0::2] = np.sin(pos * freq)
    out[..., 1::2] = np.cos(pos * freq[: dim // 2])
    return out


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, 1, H, W) -> (B, g*g, patch*patch), row-major patch order."""
    b, _, h, w = images.shape
    g = h // patch
    x = images.reshape(b, g, patch, w // patch, patch).transpose(0, 1, 3, 2, 4)
    return x.reshape(b, g * (w // patch), patch * patch)


# ------------------------------------------------------------------ blocks


class Attention(Module):
    def __init__(self, rng, d: int, heads: int):
        self.heads = heads
        self.q = Linear(rng, d, d)
        self.k = Linear(rng, d, d)
        self.v = Linear(rng, d, d)
        self.o = Linear(rng, d, d)

    def _split(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        return x.reshape(b, t, self.heads, d // self.heads).transpose(0, 2, 1, 3)

    def __call__(self, x: Tensor, mem: Tensor, mask: np.ndarray) -> Tensor:
        # mask: (B, 1 or Tq, Tk) booleans, True = may attend
        b, t, d = x.shape
        q, k, v = self._split(self.q(x)), self._split(self.k(mem)), self._split(self.v(mem))
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(d // self.heads))
        w = F.softmax(scores, mask[:, None])
        out = (w @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
        return self.o(out)


class FeedForward(Module):
    def __init__(self, rng, d: int, hidden: int):
        self.up = Linear(rng, d, hidden)
        self.down = Linear(rng, hidden, d)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(F.relu(self.up(x)))


class EncoderBlock(Module):
    def __init__(self, rng, d: int, heads: int, hidden: int):
        self.ln1 = LayerNorm(d)
        self.attn = Attention(rng, d, heads)
        self.ln2 = LayerNorm(d)
        self.ff = FeedForward(rng, d, hidden)

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        h = self.ln1(x)
        x = x + self.attn(h, h, mask)
        return x + self.ff(self.ln2(x))


class DecoderBlock(Module):
    def __init__(self, rng, d: int, heads: int, hidden: int):
        self.ln1 = LayerNorm(d)
        self.self_attn = Attention(rng, d, heads)
        self.ln2 = LayerNorm(d)
        self.cross = Attention(rng, d, heads)
        self.ln3 = LayerNorm(d)
        self.ff = FeedForward(rng, d, hidden)

    def __call__(self, x: Tensor, causal: np.ndarray, mem: Tensor, mem_mask: np.ndarray) -> Tensor:
        h = self.ln1(x)
        x = x + self.self_attn(h, h, causal)
        x = x + self.cross(self.ln2(x), mem, mem_mask)
        return x + self.ff(self.ln3(x))


class AdditiveAttention(Module):
    """u_j = v^T tanh(W1 s_j + W2 d_i), normalised over unmasked j."""

    def __init__(self, rng, d: int, a: int):
        self.w1 = Linear(rng, d, a, bias=False)
        self.w2 = Linear(rng, d, a, bias=False)
        self.v = param(rng, (a,), 1.0 / np.sqrt(a))

    def __call__(self, states: Tensor, dec: Tensor, mask: np.ndarray | None) -> Tensor:
        # states (B, n, d), dec (B, T, d) -> weights (B, T, n)
        b, n, _ = states.shape
        t = dec.shape[1]
        ks = self.w1(states).reshape(b, 1, n, -1)
        qs = self.w2(dec).reshape(b, t, 1, -1)
        u = F.tanh(ks + qs) @ self.v
        return F.softmax(u, None if mask is None else mask[:, None, :])


# ------------------------------------------------------------------- model


@dataclass
class Encoded:
    image: Tensor  # (B, n, d)
    knowledge: Tensor | None  # (B, m, d) or None when no sample has a prior
    knowledge_ids: np.ndarray  # (B, m) int
    has_prior: np.ndarray  # (B,) bool


@dataclass
class Heads:
    y_gen_logits: Tensor  # (B, T, V)
    image_attn: Tensor  # (B, T, n)
    copy_attn: Tensor | None  # (B, T, m)


class GeneratorModel(Module):
    def __init__(self, config: GeneratorConfig):
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        d, hd = config.d_model, config.d_model * config.ff_mult
        self.patch_embed = Linear(rng, config.patch * config.patch, d)
        self.tok_embed = param(rng, (config.vocab_size, d), 1.0)
        self.image_enc = [EncoderBlock(rng, d, config.n_heads, hd) for _ in range(config.n_layers)]
        self.image_ln = LayerNorm(d)
        self.know_enc = [EncoderBlock(rng, d, config.n_heads, hd) for _ in range(config.n_layers)]
        self.know_ln = LayerNorm(d)
        self.decoder = [DecoderBlock(rng, d, config.n_heads, hd) for _ in range(config.n_layers)]
        self.dec_ln = LayerNorm(d)
        self.gen_attn = AdditiveAttention(rng, d, config.attn_dim)
        self.gen_out = Linear(rng, 2 * d, config.vocab_size)
        self.copy_attn = AdditiveAttention(rng, d, config.attn_dim)

    def copy_parameters(self) -> list[Tensor]:
        return self.copy_attn.parameters()

    def trainable_parameters(self) -> list[Tensor]:
        if self.config.use_copy:
            return self.parameters()
        skip = {id(p) for p in self.copy_parameters()}
        return [p for p in self.parameters() if id(p) not in skip]

    # ------------------------------------------------------------ encoding
    def encode(self, images: np.ndarray, knowledge_ids: np.ndarray, patch_positions: np.ndarray | None = None,
               patches: np.ndarray | None = None) -> Encoded:
        """images (B, 1, H, W); knowledge_ids (B, m) padded with PAD.

        ``patches``/``patch_positions`` may be supplied directly to encode a
        permuted patch sequence.
        """
        cfg = self.config
        if patches is None:
            images = np.asarray(images, dtype=np.float64)
            if images.ndim != 4 or images.shape[0] == 0 or images.size == 0:
                raise ContractError(f"expected a non-empty (B, 1, H, W) image batch, got {images.shape}")
            if images.shape[-1] != cfg.image_size or images.shape[-2] != cfg.image_size:
                raise ContractError(f"image size {images.shape[-2:]} != configured {cfg.image_size}")
            mu = images.mean(axis=(1, 2, 3), keepdims=True)
            sd = images.std(axis=(1, 2, 3), keepdims=True)
            patches = patchify((images - mu) / np.maximum(sd, 1e-6), cfg.patch)
        b, n, _ = patches.shape
        if n == 0:
            raise ContractError("empty image: no patches to encode")
        if patch_positions is None:
            patch_positions = np.broadcast_to(np.arange(n), (b, n))
        x = self.patch_embed(Tensor(patches)) + sinusoid(patch_positions, cfg.d_model)
        full = np.ones((b, 1, n), dtype=bool)
        for blk in self.image_enc:
            x = blk(x, full)
        image = self.image_ln(x)

        knowledge_ids = np.asarray(knowledge_ids, dtype=np.int64).reshape(b, -1)
        has_prior = ((knowledge_ids != PAD) & (knowledge_ids != SEP)).any(axis=1)
        know = None
        if knowledge_ids.shape[1] and has_prior.any():
            m = knowledge_ids.shape[1]
            keep = knowledge_ids != PAD
            k = F.embedding(self.tok_embed, knowledge_ids) + sinusoid(np.arange(m), cfg.d_model)
            for blk in self.know_enc:
                k = blk(k, keep[:, None, :])
            know = self.know_ln(k)
        return Encoded(image, know, knowledge_ids, has_prior)

    # ------------------------------------------------------------ decoding
    def decode_states(self, enc: Encoded, prefix: np.ndarray) -> Tensor:
        """Final decoder hidden states d_i for a (B, T) prefix starting at BOS."""
        prefix = np.asarray(prefix, dtype=np.int64)
        b, t = prefix.shape
        if t > self.config.max_output:
            raise ContractError(f"prefix of {t} tokens exceeds max_output {self.config.max_output}")
        x = F.embedding(self.tok_embed, prefix) + sinusoid(np.arange(t), self.config.d_model)
        causal = np.tril(np.ones((t, t), dtype=bool))[None] & (prefix != PAD)[:, None, :]
        causal |= np.eye(t, dtype=bool)[None]
        n = enc.image.shape[1]
        if enc.knowledge is None:
            mem, mem_mask = enc.image, np.ones((b, 1, n), dtype=bool)
        else:
            mem = concat([enc.image, enc.knowledge], axis=1)
            mem_mask = np.concatenate([np.ones((b, n), dtype=bool), enc.knowledge_ids != PAD], axis=1)[:, None, :]
        for blk in self.decoder:
            x = blk(x, causal, mem, mem_mask)
        return self.dec_ln(x)

    def heads(self, enc: Encoded, dec: Tensor) -> Heads:
        a = self.gen_attn(enc.image, dec, None)
        ctx = a @ enc.image  # d'_i
        logits = self.gen_out(concat([ctx, dec], axis=-1))
        copy = None
        if enc.knowledge is not None:
            ids = enc.knowledge_ids
            copy = self.copy_attn(enc.knowledge, dec, (ids != PAD) & (ids != SEP))
        return Heads(logits, a, copy)

    def mix_weight(self, enc: Encoded) -> np.ndarray:
        """Per-sample weight h/2 of the copy distribution: 1/2 with a prior, else 0."""
        if not self.config.use_copy:
            return np.zeros(len(enc.has_prior))
        return 0.5 * enc.has_prior.astype(np.float64)

    def distributions(self, enc: Encoded, prefix: np.ndarray, last_only: bool = False):
        """Return (y, y_gen, y_copy) as arrays of shape (B, T, V)."""
        dec = self.decode_states(enc, prefix)
        if last_only:
            dec = dec[:, -1:, :]
        h = self.heads(enc, dec)
        y_gen = F.softmax(h.y_gen_logits).data
        y_copy = np.zeros_like(y_gen)
        if h.copy_attn is not None:
            y_copy = F.scatter_last(h.copy_attn, enc.knowledge_ids, self.config.vocab_size).data
        lam = self.mix_weight(enc)[:, None, None]
        y = (1.0 - lam) * y_gen + lam * y_copy
        return y, y_gen, y_copy

    def loss(self, enc: Encoded, inputs: np.ndarray, targets: np.ndarray) -> Tensor:
        """Teacher-forced mean of -log y(target) over non-pad target positions.

        y(target) = (1 - lam) y_gen(target) + lam * sum_j a_j [id_j == target],
        computed without materialising the full mixed distribution.
        """
        targets = np.asarray(targets, dtype=np.int64)
        weights = (targets != PAD).astype(np.float64)
        norm = weights.sum()
        if norm <= 0:
            raise ContractError("loss over a batch with no target tokens")
        dec = self.decode_states(enc, inputs)
        h = self.heads(enc, dec)
        lam = self.mix_weight(enc)
        if h.copy_attn is None or not lam.any():
            return F.cross_entropy(h.y_gen_logits, targets, weights)
        p_gen = F.exp(F.pick(F.log_softmax(h.y_gen_logits), targets))
        match = (enc.knowledge_ids[:, None, :] == targets[:, :, None]).astype(np.float64)
        p_copy = (h.copy_attn * match).sum(axis=-1)
        lam = lam[:, None]
        p = p_gen * (1.0 - lam) + p_copy * lam
        # pad targets contribute a constant 1 inside the log
        p = F.where_const(weights > 0, p, 1.0)
        return -(F.log(p) * weights).sum() * (1.0 / norm)
