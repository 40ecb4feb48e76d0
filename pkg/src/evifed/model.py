"""Frozen two-encoder transformer with prefix prompts and an evidential answer head.

Each encoder block runs pre-norm multi-head attention followed by a ReLU MLP.
Prompted blocks prepend learnable rows to the keys and values of every head;
queries are untouched so sequence length never changes.  The image and
question features are mean-pooled and concatenated into a ``2m`` vector that
feeds the per-client answer head.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from evifed import autodiff as ad
from evifed.autodiff import Tensor
from evifed.errors import ConfigError, DimensionError

ENCODERS = ("image", "question")


@dataclass(frozen=True)
class BackboneConfig:
    hidden_dim: int = 32
    blocks: int = 4
    heads: int = 4
    image_grid: int = 8
    patch_size: int = 2
    question_vocab: int = 32
    max_question_len: int = 8
    answer_count: int = 8
    seed: int = 0

    def __post_init__(self) -> None:
        checks = [
            (self.hidden_dim >= 1, "hidden_dim must be positive"),
            (self.heads >= 1 and self.hidden_dim % self.heads == 0,
             "hidden_dim must be divisible by heads"),
            (self.blocks >= 1, "blocks must be positive"),
            (self.answer_count >= 2, "answer_count must be >= 2"),
            (self.patch_size >= 1 and self.image_grid % self.patch_size == 0,
             "patch_size must divide image_grid"),
            (self.question_vocab >= 2, "question_vocab must be >= 2"),
            (self.max_question_len >= 1, "max_question_len must be positive"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.heads

    @property
    def n_patches(self) -> int:
        return (self.image_grid // self.patch_size) ** 2

    @property
    def feature_dim(self) -> int:
        return 2 * self.hidden_dim


# -- attention ------------------------------------------------------------


def attention(Q: Tensor, K: Tensor, V: Tensor) -> Tensor:
    """softmax(Q K^T / sqrt(width)) V over the last two axes."""
    width = Q.shape[-1]
    if K.shape[-1] != width or K.shape[-2] != V.shape[-2]:
        raise DimensionError(f"attention: Q {Q.shape}, K {K.shape}, V {V.shape} incompatible")
    axes = tuple(range(K.data.ndim - 2)) + (K.data.ndim - 1, K.data.ndim - 2)
    scores = ad.scale(ad.matmul(Q, ad.transpose(K, axes)), 1.0 / math.sqrt(width))
    return ad.matmul(ad.softmax_rows(scores), V)


def prefix_attention(Q: Tensor, K: Tensor, V: Tensor, pK: Tensor, pV: Tensor) -> Tensor:
    """Attention with key/value prefixes: K' = [pK; K], V' = [pV; V]."""
    Q, K, V, pK, pV = (ad.as_tensor(t) for t in (Q, K, V, pK, pV))
    width = Q.shape[-1]
    for name, t in (("K", K), ("V", V), ("pK", pK), ("pV", pV)):
        if t.shape[-1] != width:
            raise DimensionError(f"prefix_attention: {name} width {t.shape[-1]} != Q width {width}")
    if K.shape[-2] != V.shape[-2] or pK.shape[-2] != pV.shape[-2]:
        raise DimensionError(
            f"prefix_attention: row counts differ (K {K.shape}, V {V.shape}, "
            f"pK {pK.shape}, pV {pV.shape})")
    if pK.shape[-2] == 0:
        return attention(Q, K, V)
    axis = K.data.ndim - 2
    return attention(Q, ad.concat([pK, K], axis), ad.concat([pV, V], axis))


# -- prompts ----------------------------------------------------------------


@dataclass
class PromptSet:
    """Key/value prefixes per encoder and prompted block, each of shape (d/2, m)."""

    prompt_len: int
    prompted_blocks: tuple[int, ...]
    hidden_dim: int
    params: dict[tuple[str, int], tuple[Tensor, Tensor]] = field(default_factory=dict)

    @classmethod
    def init(cls, cfg: BackboneConfig, prompt_len: int = 8,
             prompted_blocks=(0, 1, 2, 3), rng: np.random.Generator | None = None,
             std: float = 0.02) -> "PromptSet":
        if prompt_len < 0 or prompt_len % 2:
            raise ConfigError(f"prompt length must be even and nonnegative, got {prompt_len}")
        blocks = tuple(int(b) for b in prompted_blocks)
        if any(b < 0 or b >= cfg.blocks for b in blocks) or len(set(blocks)) != len(blocks):
            raise ConfigError(f"prompted blocks {blocks} not distinct within [0, {cfg.blocks})")
        rng = rng if rng is not None else np.random.default_rng(0)
        half = prompt_len // 2
        params = {}
        for enc in ENCODERS:
            for b in blocks:
                pk = rng.normal(0.0, std, (half, cfg.hidden_dim))
                pv = rng.normal(0.0, std, (half, cfg.hidden_dim))
                params[(enc, b)] = (Tensor(pk, requires_grad=True), Tensor(pv, requires_grad=True))
        return cls(prompt_len, blocks, cfg.hidden_dim, params)

    def keys(self) -> list[tuple[str, int]]:
        return [(enc, b) for enc in ENCODERS for b in self.prompted_blocks]

    def tensors(self) -> list[Tensor]:
        return [t for key in self.keys() for t in self.params[key]]

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for enc, b in self.keys():
            pk, pv = self.params[(enc, b)]
            out[f"{enc}.block{b}.key"] = pk.data
            out[f"{enc}.block{b}.value"] = pv.data
        return out

    def flat(self) -> np.ndarray:
        arrays = [t.data.ravel() for t in self.tensors()]
        return np.concatenate(arrays) if arrays else np.zeros(0)

    @property
    def n_scalars(self) -> int:
        return 2 * len(self.prompted_blocks) * self.prompt_len * self.hidden_dim

    def with_tensors(self, tensors: list[Tensor]) -> "PromptSet":
        """Same layout, new tensors in :meth:`tensors` order."""
        it = iter(tensors)
        params = {key: (next(it), next(it)) for key in self.keys()}
        return PromptSet(self.prompt_len, self.prompted_blocks, self.hidden_dim, params)

    def from_flat(self, flat: np.ndarray, requires_grad: bool = True) -> "PromptSet":
        need = sum(t.size for t in self.tensors())
        if flat.size != need:
            raise DimensionError(f"flat prompt vector has {flat.size} entries, layout needs {need}")
        tensors, pos = [], 0
        for t in self.tensors():
            n = t.size
            tensors.append(Tensor(flat[pos:pos + n].reshape(t.shape), requires_grad=requires_grad))
            pos += n
        return self.with_tensors(tensors)

    def copy(self) -> "PromptSet":
        return self.from_flat(self.flat().copy())

    def compatible(self, other: "PromptSet") -> bool:
        return (self.prompt_len == other.prompt_len
                and self.prompted_blocks == other.prompted_blocks
                and self.hidden_dim == other.hidden_dim)


# -- answer head --------------------------------------------------------------


@dataclass
class AnswerHead:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    dropout: float = 0.2

    @classmethod
    def init(cls, in_dim: int, n_answers: int, hidden: int = 64, dropout: float = 0.2,
             rng: np.random.Generator | None = None) -> "AnswerHead":
        rng = rng if rng is not None else np.random.default_rng(0)
        w1 = rng.normal(0.0, 1.0 / math.sqrt(in_dim), (in_dim, hidden))
        w2 = rng.normal(0.0, 1.0 / math.sqrt(hidden), (hidden, n_answers))
        return cls(Tensor(w1, True), Tensor(np.zeros(hidden), True),
                   Tensor(w2, True), Tensor(np.zeros(n_answers), True), dropout)

    def tensors(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {"head.w1": self.w1.data, "head.b1": self.b1.data,
                "head.w2": self.w2.data, "head.b2": self.b2.data}

    @property
    def n_scalars(self) -> int:
        return sum(t.size for t in self.tensors())

    def copy(self) -> "AnswerHead":
        return AnswerHead(*(Tensor(t.data.copy(), True) for t in self.tensors()),
                          dropout=self.dropout)

    def forward(self, features: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        h = ad.relu(ad.add_bias(ad.matmul(features, self.w1), self.b1))
        h = ad.dropout(h, self.dropout, rng)
        return ad.add_bias(ad.matmul(h, self.w2), self.b2)


# -- backbone -------------------------------------------------------------------


@dataclass
class Block:
    wqkv: Tensor  # (m, 3m): query, key and value projections side by side
    wo: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class Backbone:
    cfg: BackboneConfig
    patch_proj: np.ndarray
    image_pos: np.ndarray
    token_emb: np.ndarray
    question_pos: np.ndarray
    encoders: dict[str, list[Block]]

    def tensors(self) -> list[Tensor]:
        return [t for enc in ENCODERS for blk in self.encoders[enc]
                for t in (blk.wqkv, blk.wo, blk.w1, blk.b1, blk.w2, blk.b2)]

    def checksum(self) -> str:
        h = hashlib.sha256()
        for arr in (self.patch_proj, self.image_pos, self.token_emb, self.question_pos):
            h.update(np.ascontiguousarray(arr).tobytes())
        for t in self.tensors():
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def embed_images(self, images: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 2:
            images = images[None]
        n, g, p = images.shape[0], cfg.image_grid, cfg.patch_size
        if images.shape[1:] != (g, g):
            raise DimensionError(f"images must be {g}x{g}, got {images.shape[1:]}")
        k = g // p
        patches = images.reshape(n, k, p, k, p).transpose(0, 1, 3, 2, 4).reshape(n, k * k, p * p)
        return patches @ self.patch_proj + self.image_pos

    def embed_questions(self, questions: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        q = np.asarray(questions, dtype=np.int64)
        if q.ndim == 1:
            q = q[None]
        if q.shape[1] != cfg.max_question_len:
            raise DimensionError(
                f"questions must have {cfg.max_question_len} tokens, got {q.shape[1]}")
        if q.min() < 0 or q.max() >= cfg.question_vocab:
            raise DimensionError("question token id out of vocabulary range")
        return self.token_emb[q] + self.question_pos

    def encode(self, enc: str, x0: np.ndarray, prompts: PromptSet | None) -> Tensor:
        """Run one encoder on embedded inputs (B, L, m); returns pooled (B, m)."""
        n, length, m = x0.shape
        x = Tensor(x0)
        for i, blk in enumerate(self.encoders[enc]):
            hn = ad.reshape(ad.layer_norm(x), (n * length, m))
            qkv = ad.reshape(ad.matmul(hn, blk.wqkv), (n, length, 3 * m))
            pair = prompts.params.get((enc, i)) if prompts is not None else None
            if pair is not None and prompts.prompt_len > 0:
                for p in pair:
                    if p.shape != (prompts.prompt_len // 2, m):
                        raise DimensionError(f"prompt shape {p.shape} incompatible with width {m}")
                a = ad.multihead_prefix_attention(qkv, pair[0], pair[1], self.cfg.heads)
            else:
                a = ad.multihead_prefix_attention(qkv, None, None, self.cfg.heads)
            a = ad.reshape(a, (n * length, m))
            x = ad.add(x, ad.reshape(ad.matmul(a, blk.wo), (n, length, m)))
            hn = ad.reshape(ad.layer_norm(x), (n * length, m))
            mlp = ad.relu(ad.add_bias(ad.matmul(hn, blk.w1), blk.b1))
            mlp = ad.add_bias(ad.matmul(mlp, blk.w2), blk.b2)
            x = ad.add(x, ad.reshape(mlp, (n, length, m)))
        return ad.mean_axis(ad.layer_norm(x), 1)

    def features(self, images, questions, prompts: PromptSet | None = None) -> Tensor:
        img = self.encode("image", self.embed_images(images), prompts)
        que = self.encode("question", self.embed_questions(questions), prompts)
        return ad.concat([img, que], axis=1)


def build_backbone(cfg: BackboneConfig) -> Backbone:
    """Random frozen backbone drawn from ``cfg.seed``; no tensor requires grad."""
    if not isinstance(cfg, BackboneConfig):
        raise ConfigError("build_backbone expects a BackboneConfig")
    rng = np.random.default_rng(cfg.seed)
    m = cfg.hidden_dim

    def mat(rows, cols):
        return Tensor(rng.normal(0.0, 1.0 / math.sqrt(rows), (rows, cols)))

    encoders = {}
    for enc in ENCODERS:
        encoders[enc] = [
            Block(wqkv=Tensor(np.concatenate([mat(m, m).data for _ in range(3)], axis=1)),
                  wo=mat(m, m),
                  w1=mat(m, 2 * m), b1=Tensor(np.zeros(2 * m)),
                  w2=mat(2 * m, m), b2=Tensor(np.zeros(m)))
            for _ in range(cfg.blocks)
        ]
    p2 = cfg.patch_size ** 2
    return Backbone(
        cfg=cfg,
        patch_proj=rng.normal(0.0, 1.0, (p2, m)),
        image_pos=rng.normal(0.0, 0.5, (cfg.n_patches, m)),
        token_emb=rng.normal(0.0, 1.0, (cfg.question_vocab, m)),
        question_pos=rng.normal(0.0, 0.5, (cfg.max_question_len, m)),
        encoders=encoders,
    )


def client_forward(backbone: Backbone, prompts: PromptSet | None, head: AnswerHead,
                   images, questions, rng: np.random.Generator | None = None) -> Tensor:
    """Logits of shape (B, J); ``rng`` enables dropout in the head."""
    if prompts is not None and prompts.hidden_dim != backbone.cfg.hidden_dim:
        raise DimensionError(
            f"prompt width {prompts.hidden_dim} != backbone width {backbone.cfg.hidden_dim}")
    feats = backbone.features(images, questions, prompts)
    return head.forward(feats, rng)


def trainable_count(prompts: PromptSet, head: AnswerHead) -> int:
    return prompts.n_scalars + head.n_scalars
