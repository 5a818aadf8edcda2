"""Contrastive dual encoder used as the retriever: a small image-feature MLP
and a bag-of-tokens text MLP trained with symmetric InfoNCE so paired items
land close in cosine space.

Text goes through a whitespace tokenizer whose tokens are hashed into a fixed
bucket vocabulary with FNV-1a (stable across platforms, unlike Python's
builtin hash). Both encoders L2-normalize their outputs, and the temperature
is learned in log space, initialized at 0.07.

Checkpoint format (little-endian)::

    magic "RSDE" | version u16 | d_img_raw u32 | d_e u32 | vocab u32 | hidden u32 |
    float32 blocks: img_w1, img_b1, img_w2, img_b2,
                    txt_w1, txt_b1, txt_w2, txt_b2, log_temp
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DomainError, FormatError, ShapeError
from .numerics import Rng

MAGIC = b"RSDE"
FORMAT_VERSION = 1
INIT_TEMPERATURE = 0.07

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def _fnv1a(token: str) -> int:
    h = _FNV_OFFSET
    for byte in token.encode("utf-8"):
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


def tokenize_text(text: str, vocab: int) -> list[int]:
    """Whitespace tokens, case-folded, hashed into `vocab` buckets."""
    tokens = text.casefold().split()
    if not tokens:
        raise DomainError("tokenize_text: no tokens in text")
    return [_fnv1a(tok) % vocab for tok in tokens]


def bag_vector(token_ids, vocab: int) -> np.ndarray:
    """L2-normalized token count vector of length `vocab`."""
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.size == 0:
        raise DomainError("bag_vector: empty token list")
    if ids.min() < 0 or ids.max() >= vocab:
        raise ShapeError(f"bag_vector: token id out of range for vocab {vocab}")
    counts = np.bincount(ids, minlength=vocab).astype(np.float64)
    return counts / np.linalg.norm(counts)


@dataclass
class ContrastivePair:
    image_features: np.ndarray
    text_tokens: list[int]


@dataclass
class MlpParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class DualEncoderParams:
    image_proj: MlpParams
    text_proj: MlpParams
    log_temp: Tensor  # temperature = exp(log_temp) > 0

    @property
    def d_img_raw(self) -> int:
        return self.image_proj.w1.value.shape[0]

    @property
    def d_e(self) -> int:
        return self.image_proj.w2.value.shape[1]

    @property
    def vocab(self) -> int:
        return self.text_proj.w1.value.shape[0]

    @property
    def hidden(self) -> int:
        return self.image_proj.w1.value.shape[1]

    @property
    def temperature(self) -> float:
        return float(np.exp(self.log_temp.value[0, 0]))

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for prefix, mlp in (("image_proj", self.image_proj), ("text_proj", self.text_proj)):
            for field in ("w1", "b1", "w2", "b2"):
                out.append((f"{prefix}.{field}", getattr(mlp, field)))
        out.append(("log_temp", self.log_temp))
        return out


def _init_mlp(d_in: int, hidden: int, d_out: int, rng: Rng) -> MlpParams:
    return MlpParams(
        w1=ad.param(rng.normal((d_in, hidden), std=1.0 / math.sqrt(d_in))),
        b1=ad.param(np.zeros((1, hidden))),
        w2=ad.param(rng.normal((hidden, d_out), std=1.0 / math.sqrt(hidden))),
        b2=ad.param(np.zeros((1, d_out))),
    )


def init_params(d_img_raw: int, d_e: int, vocab: int, hidden: int, seed: int) -> DualEncoderParams:
    rng = Rng(seed)
    return DualEncoderParams(
        image_proj=_init_mlp(d_img_raw, hidden, d_e, rng.spawn(1)),
        text_proj=_init_mlp(vocab, hidden, d_e, rng.spawn(2)),
        log_temp=ad.param(np.full((1, 1), math.log(INIT_TEMPERATURE))),
    )


def _mlp_rows(mlp: MlpParams, rows: Tensor) -> Tensor:
    h = ad.tanh(ad.matmul(rows, mlp.w1) + mlp.b1)
    return ad.l2_normalize_rows(ad.matmul(h, mlp.w2) + mlp.b2)


def encode_image_rows(params: DualEncoderParams, feats: Tensor) -> Tensor:
    if feats.value.shape[1] != params.d_img_raw:
        raise ShapeError(
            f"encode_image: feature dim {feats.value.shape[1]} != d_img_raw {params.d_img_raw}"
        )
    return _mlp_rows(params.image_proj, feats)


def encode_text_rows(params: DualEncoderParams, bags: Tensor) -> Tensor:
    if bags.value.shape[1] != params.vocab:
        raise ShapeError(f"encode_text: bag dim {bags.value.shape[1]} != vocab {params.vocab}")
    return _mlp_rows(params.text_proj, bags)


def encode_image(params: DualEncoderParams, image_features) -> np.ndarray:
    """Unit-norm embedding of one raw image-feature vector."""
    feats = np.asarray(image_features, dtype=np.float64).reshape(1, -1)
    return encode_image_rows(params, ad.const(feats)).value[0]


def encode_text(params: DualEncoderParams, text_tokens) -> np.ndarray:
    """Unit-norm embedding of one token-id list (order-invariant bag)."""
    bag = bag_vector(text_tokens, params.vocab).reshape(1, -1)
    return encode_text_rows(params, ad.const(bag)).value[0]


def infonce_from_logits(logits: np.ndarray) -> float:
    """Mean of row-wise and column-wise softmax cross-entropy at the diagonal."""
    logits = np.asarray(logits, dtype=np.float64)
    b = logits.shape[0]
    if logits.shape != (b, b):
        raise ShapeError(f"infonce: logits must be square, got {logits.shape}")
    total = 0.0
    for mat in (logits, logits.T):
        mx = mat.max(axis=1, keepdims=True)
        lse = mx[:, 0] + np.log(np.exp(mat - mx).sum(axis=1))
        total += float((lse - np.diag(mat)).mean())
    return total / 2.0


def _batch_arrays(params: DualEncoderParams, batch) -> tuple[np.ndarray, np.ndarray]:
    if len(batch) < 2:
        raise DomainError(f"contrastive batch needs >= 2 pairs, got {len(batch)}")
    texts = [tuple(p.text_tokens) for p in batch]
    if len(set(texts)) != len(texts):
        raise DomainError("contrastive batch contains duplicate texts")
    feats = np.stack([np.asarray(p.image_features, dtype=np.float64) for p in batch])
    bags = np.stack([bag_vector(p.text_tokens, params.vocab) for p in batch])
    return feats, bags


def contrastive_loss_graph(params: DualEncoderParams, batch) -> Tensor:
    feats, bags = _batch_arrays(params, batch)
    z_img = encode_image_rows(params, ad.const(feats))
    z_txt = encode_text_rows(params, ad.const(bags))
    sims = ad.matmul(z_img, ad.transpose(z_txt))
    logits = ad.mul(sims, ad.exp(ad.neg(params.log_temp)))
    diag = np.arange(len(batch))
    loss_i2t = ad.cross_entropy(logits, diag)
    loss_t2i = ad.cross_entropy(ad.transpose(logits), diag)
    return ad.scale(loss_i2t + loss_t2i, 0.5)


def contrastive_loss(params: DualEncoderParams, batch) -> float:
    """Symmetric InfoNCE over the B x B cosine matrix scaled by 1/temperature."""
    return float(contrastive_loss_graph(params, batch).value)


def train_retriever(
    pairs,
    *,
    d_img_raw: int,
    d_e: int,
    vocab: int,
    hidden: int = 32,
    epochs: int = 200,
    lr: float = 0.1,
    seed: int = 0,
    momentum: float = 0.0,
    batch_size: int | None = None,
) -> tuple[DualEncoderParams, list[float]]:
    """Gradient descent on the contrastive loss; returns params and the
    per-epoch loss log. Aborts on divergence."""
    pairs = list(pairs)
    if len(pairs) < 8:
        raise DomainError(f"train_retriever needs >= 8 pairs, got {len(pairs)}")
    params = init_params(d_img_raw, d_e, vocab, hidden, seed)
    named = params.named_parameters()
    velocity = {name: np.zeros_like(t.value) for name, t in named}
    order_rng = Rng(seed).spawn(99)
    batch_size = batch_size or len(pairs)
    history = []
    for _ in range(epochs):
        order = order_rng.permutation(len(pairs))
        epoch_losses = []
        for start in range(0, len(pairs), batch_size):
            batch = [pairs[i] for i in order[start : start + batch_size]]
            if len(batch) < 2:
                continue
            ad.zero_grads(t for _, t in named)
            loss = contrastive_loss_graph(params, batch)
            if not np.isfinite(loss.value):
                raise DomainError(f"train_retriever: non-finite loss {loss.value} at epoch {len(history)}")
            ad.backward(loss)
            for name, t in named:
                g = t.grad if t.grad is not None else np.zeros_like(t.value)
                if momentum:
                    velocity[name] = momentum * velocity[name] + g
                    g = velocity[name]
                t.value -= lr * g
            epoch_losses.append(float(loss.value))
        history.append(float(np.mean(epoch_losses)))
    return params, history


def recall_at_1(params: DualEncoderParams, pairs) -> float:
    """Fraction of images whose nearest text embedding is their own pair."""
    z_img = np.stack([encode_image(params, p.image_features) for p in pairs])
    z_txt = np.stack([encode_text(params, p.text_tokens) for p in pairs])
    sims = z_img @ z_txt.T
    return float((sims.argmax(axis=1) == np.arange(len(pairs))).mean())


def save_params(params: DualEncoderParams, path) -> None:
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<H", FORMAT_VERSION)
    blob += struct.pack("<IIII", params.d_img_raw, params.d_e, params.vocab, params.hidden)
    for _, tensor in params.named_parameters():
        blob += tensor.value.astype("<f4").tobytes()
    Path(path).write_bytes(bytes(blob))


def load_params(path) -> DualEncoderParams:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r} at byte 0, expected {MAGIC!r}")
    (version,) = struct.unpack("<H", data[4:6])
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported retriever version {version} at byte 4")
    d_img_raw, d_e, vocab, hidden = struct.unpack("<IIII", data[6:22])
    params = init_params(d_img_raw, d_e, vocab, hidden, seed=0)
    offset = 22
    for name, tensor in params.named_parameters():
        n = tensor.value.size
        end = offset + 4 * n
        if end > len(data):
            raise FormatError(f"truncated payload reading {name} at byte {offset}")
        block = np.frombuffer(data[offset:end], dtype="<f4").astype(np.float64)
        tensor.value = block.reshape(tensor.value.shape)
        offset = end
    if offset != len(data):
        raise FormatError(f"trailing {len(data) - offset} bytes at byte {offset}")
    return params
