"""End-to-end toy vision-language model.

A small pre-norm self-attention visual encoder is tapped at L depths to
produce multi-level features. The prompter turns those features, the
retrieved semantics, and the user query into prompt tokens. The decoder-only
LM consumes [image tokens; prompt tokens per level; query tokens] under a
causal mask, with the expert layer replacing the plain FFN in every
`expert_stride`-th block. Query text uses a byte-level tokenizer (ids 0..255)
plus EOS and SEP specials; retrieved semantic texts share the same LM
embedding table.

Checkpoint format (little-endian)::

    magic "RSCK" | version u16 | manifest byte-length u32 | manifest UTF-8 JSON |
    float32 blocks in manifest order

The manifest records the model config and each named parameter's shape.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, FormatError, ShapeError
from .expert_layer import (
    IMG_TAG,
    QUERY_TAG,
    ExpertLayerParams,
    FfnParams,
    SegmentedTokens,
    expert_block_graph,
    ffn_graph,
    init_expert_layer,
    init_ffn,
    sem_tag,
)
from .numerics import Rng
from .prompter import (
    AttnBlockParams,
    PrompterConfig,
    PrompterParams,
    attention_output,
    build_prompt_graph,
    init_attn_block,
    init_prompter,
)

EOS_ID = 256
SEP_ID = 257
VOCAB_SIZE = 258
CHECKPOINT_MAGIC = b"RSCK"
CHECKPOINT_VERSION = 1
CAUSAL_BIAS = -1e30


def encode_text(text: str) -> list[int]:
    """Byte-level token ids for a UTF-8 string."""
    return list(text.encode("utf-8"))


def decode_ids(ids) -> str:
    return bytes(i for i in ids if 0 <= i < 256).decode("utf-8", errors="replace")


def semantic_token_ids(texts, cap: int = 512) -> list[int]:
    """Tokenize retrieved texts in rank order, SEP-joined, truncated at cap."""
    ids: list[int] = []
    for rank, text in enumerate(texts):
        if rank > 0:
            ids.append(SEP_ID)
        ids.extend(encode_text(text))
    ids = ids[:cap]
    return ids if ids else [SEP_ID]


@dataclass
class ModelConfig:
    d_h: int = 32
    heads: int = 2
    lm_blocks: int = 4
    expert_stride: int = 4
    levels: int = 2
    d_r: int = 8
    d_i: int = 64
    n_agg: int = 4
    prompter_heads: int = 2
    patch_dim: int = 8
    d_v: int = 16
    visual_blocks: int = 3
    visual_heads: int = 2
    visual_inner: int = 32
    vocab: int = VOCAB_SIZE
    max_seq: int = 512

    def problems(self) -> list[str]:
        out = []
        for name in ("d_h", "heads", "lm_blocks", "expert_stride", "levels", "d_r", "d_i",
                     "n_agg", "prompter_heads", "patch_dim", "d_v", "visual_blocks",
                     "visual_heads", "visual_inner", "vocab", "max_seq"):
            if getattr(self, name) <= 0:
                out.append(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_r >= self.d_h:
            out.append(f"d_r {self.d_r} must be < d_h {self.d_h}")
        if self.d_h % self.heads != 0:
            out.append(f"d_h {self.d_h} not divisible by heads {self.heads}")
        if self.d_h % self.prompter_heads != 0:
            out.append(f"d_h {self.d_h} not divisible by prompter_heads {self.prompter_heads}")
        if self.d_v % self.visual_heads != 0:
            out.append(f"d_v {self.d_v} not divisible by visual_heads {self.visual_heads}")
        if self.visual_blocks < self.levels:
            out.append(f"visual_blocks {self.visual_blocks} < levels {self.levels}")
        return out

    def __post_init__(self):
        probs = self.problems()
        if probs:
            raise ConfigError(probs)

    def tap_indices(self) -> list[int]:
        """1-based visual block indices feeding the L feature levels."""
        taps = [max(1, (i * self.visual_blocks) // self.levels) for i in range(1, self.levels + 1)]
        if len(set(taps)) != len(taps):
            raise ConfigError([f"visual taps {taps} not strictly increasing"])
        return taps

    def expert_block_indices(self) -> list[int]:
        """1-based LM block indices that carry the expert layer."""
        return [i for i in range(1, self.lm_blocks + 1) if i % self.expert_stride == 0]


@dataclass
class VisualBlockParams:
    attn: AttnBlockParams
    mlp: FfnParams


@dataclass
class VisualEncoderParams:
    patch_w: Tensor
    patch_b: Tensor
    blocks: list[VisualBlockParams]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("patch_embed.w", self.patch_w), ("patch_embed.b", self.patch_b)]
        for i, blk in enumerate(self.blocks, start=1):
            out += blk.attn.named(f"block{i}.attn")
            out += blk.mlp.named(f"block{i}.mlp")
        return out


@dataclass
class LmBlockParams:
    attn: AttnBlockParams
    ffn: FfnParams | None
    experts: ExpertLayerParams | None


@dataclass
class LmParams:
    embed: Tensor
    pos: Tensor
    blocks: list[LmBlockParams]
    head: Tensor

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("embed", self.embed), ("pos", self.pos)]
        for i, blk in enumerate(self.blocks, start=1):
            out += blk.attn.named(f"block{i}.attn")
            if blk.experts is not None:
                out += blk.experts.named_parameters(f"block{i}.")
            else:
                out += blk.ffn.named(f"block{i}.ffn")
        out.append(("head", self.head))
        return out


@dataclass
class VlmModel:
    config: ModelConfig
    visual: VisualEncoderParams
    prompter: PrompterParams
    proj_w: Tensor
    proj_b: Tensor
    lm: LmParams

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("visual." + n, t) for n, t in self.visual.named_parameters()]
        out += [("prompter." + n, t) for n, t in self.prompter.named_parameters()]
        out += [("projector.w", self.proj_w), ("projector.b", self.proj_b)]
        out += [("lm." + n, t) for n, t in self.lm.named_parameters()]
        return out


@dataclass
class Sample:
    """One training/inference item with precomputed patch features and the
    token ids of its retrieved semantic descriptions."""

    patches: np.ndarray
    query_ids: list[int]
    response_ids: list[int] = field(default_factory=list)
    semantic_ids: list[int] = field(default_factory=lambda: [SEP_ID])

    def __post_init__(self):
        self.patches = np.asarray(self.patches, dtype=np.float64)
        if self.patches.ndim != 2 or self.patches.shape[0] < 1:
            raise ShapeError(f"sample patches must be a nonempty 2-D grid, got {self.patches.shape}")
        if len(self.query_ids) < 1:
            raise ShapeError("sample query must contain at least one token")
        if len(self.semantic_ids) < 1:
            raise ShapeError("sample needs at least one semantic token")


def init_model(cfg: ModelConfig, seed: int) -> VlmModel:
    master = Rng(seed)
    vrng = master.spawn(1)
    visual = VisualEncoderParams(
        patch_w=ad.param(vrng.spawn(0).normal((cfg.patch_dim, cfg.d_v), std=1.0 / np.sqrt(cfg.patch_dim))),
        patch_b=ad.param(np.zeros((1, cfg.d_v))),
        blocks=[
            VisualBlockParams(
                attn=init_attn_block(cfg.d_v, cfg.d_v, cfg.d_v, vrng.spawn(10 + i)),
                mlp=init_ffn(cfg.d_v, cfg.visual_inner, cfg.d_v, vrng.spawn(50 + i)),
            )
            for i in range(cfg.visual_blocks)
        ],
    )
    prompter = init_prompter(
        PrompterConfig(cfg.n_agg, cfg.d_h, cfg.levels, cfg.prompter_heads,
                       [cfg.d_v] * cfg.levels),
        master.spawn(2),
    )
    prng = master.spawn(3)
    lrng = master.spawn(4)
    expert_set = set(cfg.expert_block_indices())
    blocks = []
    for i in range(1, cfg.lm_blocks + 1):
        attn = init_attn_block(cfg.d_h, cfg.d_h, cfg.d_h, lrng.spawn(10 + i))
        if i in expert_set:
            blocks.append(LmBlockParams(
                attn=attn, ffn=None,
                experts=init_expert_layer(cfg.d_h, cfg.d_r, cfg.levels, cfg.d_i, lrng.spawn(200 + i)),
            ))
        else:
            blocks.append(LmBlockParams(
                attn=attn, ffn=init_ffn(cfg.d_h, cfg.d_i, cfg.d_h, lrng.spawn(100 + i)),
                experts=None,
            ))
    lm = LmParams(
        embed=ad.param(lrng.spawn(1).normal((cfg.vocab, cfg.d_h), std=0.02)),
        pos=ad.param(lrng.spawn(2).normal((cfg.max_seq, cfg.d_h), std=0.02)),
        blocks=blocks,
        head=ad.param(lrng.spawn(3).normal((cfg.d_h, cfg.vocab), std=1.0 / np.sqrt(cfg.d_h))),
    )
    return VlmModel(
        config=cfg,
        visual=visual,
        prompter=prompter,
        proj_w=ad.param(prng.normal((cfg.d_v, cfg.d_h), std=1.0 / np.sqrt(cfg.d_v))),
        proj_b=ad.param(np.zeros((1, cfg.d_h))),
        lm=lm,
    )


def _encode_multilevel_graph(model: VlmModel, patches: Tensor) -> list[Tensor]:
    cfg = model.config
    v = model.visual
    x = ad.matmul(patches, v.patch_w) + v.patch_b
    taps = []
    tap_set = set(cfg.tap_indices())
    for i, blk in enumerate(v.blocks, start=1):
        a = ad.layer_norm_rows(x)
        x = x + attention_output(blk.attn, a, a, cfg.visual_heads)
        x = x + ffn_graph(blk.mlp, ad.layer_norm_rows(x))
        if i in tap_set:
            taps.append(x)
    return taps


def encode_multilevel(model: VlmModel, patches) -> list[np.ndarray]:
    """Visual features captured at the tap depths; L matrices, N_patches x d_v."""
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 2 or patches.shape[0] < 1:
        raise ShapeError(f"encode_multilevel: need a nonempty patch grid, got shape {patches.shape}")
    if patches.shape[1] != model.config.patch_dim:
        raise ShapeError(
            f"encode_multilevel: patch dim {patches.shape[1]} != config {model.config.patch_dim}"
        )
    return [t.value for t in _encode_multilevel_graph(model, ad.const(patches))]


def _causal_bias(t: int) -> np.ndarray:
    return np.triu(np.full((t, t), CAUSAL_BIAS), k=1)


def _lm_logits_graph(model: VlmModel, hidden: Tensor, segments) -> Tensor:
    cfg = model.config
    t = hidden.value.shape[0]
    if t > cfg.max_seq:
        raise ShapeError(f"sequence length {t} exceeds max_seq {cfg.max_seq}")
    x = hidden + ad.narrow(model.lm.pos, 0, 0, t)
    bias = _causal_bias(t)
    for blk in model.lm.blocks:
        a = ad.layer_norm_rows(x)
        x = x + attention_output(blk.attn, a, a, cfg.heads, causal_bias=bias)
        h = ad.layer_norm_rows(x)
        if blk.experts is not None:
            x = x + expert_block_graph(blk.experts, h, segments)
        else:
            x = x + ffn_graph(blk.ffn, h)
    return ad.matmul(ad.layer_norm_rows(x), model.lm.head)


def _segments_for(model: VlmModel, n_img: int, n_seq: int) -> list:
    cfg = model.config
    segs = [IMG_TAG] * n_img
    for level in range(1, cfg.levels + 1):
        segs += [sem_tag(level)] * cfg.n_agg
    segs += [QUERY_TAG] * n_seq
    return segs


def assemble_sequence(model: VlmModel, image_tokens, prompt, query_token_ids) -> SegmentedTokens:
    """Eq-order concatenation: projected image tokens, prompt blocks per
    level, embedded query-segment tokens, with matching segment tags."""
    cfg = model.config
    img = np.asarray(image_tokens, dtype=np.float64)
    s = np.asarray(prompt, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] < 1:
        raise ShapeError(f"assemble: need at least one image token, got shape {img.shape}")
    if img.shape[1] != cfg.d_v:
        raise ShapeError(f"assemble: image token dim {img.shape[1]} != d_v {cfg.d_v}")
    if s.shape[0] % cfg.n_agg != 0:
        raise ShapeError(f"assemble: prompt rows {s.shape[0]} not divisible by n_agg {cfg.n_agg}")
    if s.shape[0] // cfg.n_agg != cfg.levels:
        raise ShapeError(
            f"assemble: prompt rows {s.shape[0]} != n_agg {cfg.n_agg} * levels {cfg.levels}"
        )
    if s.shape[1] != cfg.d_h:
        raise ShapeError(f"assemble: prompt dim {s.shape[1]} != d_h {cfg.d_h}")
    ids = list(query_token_ids)
    if len(ids) < 1:
        raise ShapeError("assemble: query segment must contain at least one token")
    projected = img @ model.proj_w.value + model.proj_b.value
    embedded = model.lm.embed.value[np.asarray(ids, dtype=np.int64)]
    hidden = np.concatenate([projected, s, embedded], axis=0)
    return SegmentedTokens(hidden, _segments_for(model, img.shape[0], len(ids)))


def forward_lm(model: VlmModel, seq: SegmentedTokens, target_ids) -> tuple[float, np.ndarray]:
    """Causal forward over an assembled sequence; mean cross-entropy over the
    positions whose target id is >= 0 (ids of -1 are ignored)."""
    targets = np.asarray(target_ids, dtype=np.int64)
    if targets.shape != (seq.hidden.shape[0],):
        raise ShapeError(
            f"forward_lm: targets length {targets.shape} misaligned with sequence {seq.hidden.shape[0]}"
        )
    logits = _lm_logits_graph(model, ad.const(seq.hidden), seq.segments)
    loss = ad.cross_entropy(logits, targets)
    return float(loss.value), logits.value


def _sequence_graph(model: VlmModel, sample: Sample, seq_ids: list[int]) -> tuple[Tensor, list]:
    cfg = model.config
    taps = _encode_multilevel_graph(model, ad.const(sample.patches))
    f_user = ad.embedding(model.lm.embed, sample.query_ids)
    f_sem = ad.embedding(model.lm.embed, sample.semantic_ids)
    s = build_prompt_graph(model.prompter, f_user, f_sem, taps)
    img_tok = ad.matmul(taps[-1], model.proj_w) + model.proj_b
    q_emb = ad.embedding(model.lm.embed, seq_ids)
    hidden = ad.concat([img_tok, s, q_emb], axis=0)
    return hidden, _segments_for(model, sample.patches.shape[0], len(seq_ids))


def sample_loss_graph(model: VlmModel, sample: Sample) -> Tensor:
    """Autoregressive loss over the response span (teacher forcing)."""
    if not sample.response_ids:
        raise ShapeError("sample_loss: sample has no response tokens")
    seq_ids = list(sample.query_ids) + [SEP_ID] + list(sample.response_ids) + [EOS_ID]
    hidden, segments = _sequence_graph(model, sample, seq_ids)
    logits = _lm_logits_graph(model, hidden, segments)
    t = hidden.value.shape[0]
    targets = np.full(t, -1, dtype=np.int64)
    sep_row = sample.patches.shape[0] + model.config.n_agg * model.config.levels + len(sample.query_ids)
    supervised = list(sample.response_ids) + [EOS_ID]
    for j, tok in enumerate(supervised):
        targets[sep_row + j] = tok
    return ad.cross_entropy(logits, targets)


def sample_loss(model: VlmModel, sample: Sample) -> float:
    return float(sample_loss_graph(model, sample).value)


def token_loss_graph(model: VlmModel, sample: Sample, seq_ids, targets) -> Tensor:
    """Loss with caller-supplied query-segment ids and per-position targets;
    used by harnesses whose vocabularies lack the byte specials."""
    hidden, segments = _sequence_graph(model, sample, list(seq_ids))
    logits = _lm_logits_graph(model, hidden, segments)
    return ad.cross_entropy(logits, targets)


def generate(model: VlmModel, patches, query_ids, max_tokens: int,
             semantic_ids=None) -> list[int]:
    """Greedy argmax decoding; stops at EOS or after max_tokens ids."""
    if max_tokens <= 0:
        return []
    sample = Sample(
        patches=np.asarray(patches, dtype=np.float64),
        query_ids=list(query_ids),
        response_ids=[],
        semantic_ids=list(semantic_ids) if semantic_ids else [SEP_ID],
    )
    out: list[int] = []
    while len(out) < max_tokens:
        seq_ids = list(sample.query_ids) + [SEP_ID] + out
        hidden, segments = _sequence_graph(model, sample, seq_ids)
        logits = _lm_logits_graph(model, hidden, segments).value
        nxt = int(np.argmax(logits[-1]))
        if nxt == EOS_ID:
            break
        out.append(nxt)
    return out


def save_checkpoint(model: VlmModel, path) -> None:
    named = model.named_parameters()
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "blocks": [{"name": n, "shape": list(t.value.shape)} for n, t in named],
    }
    manifest_bytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<H", CHECKPOINT_VERSION)
    blob += struct.pack("<I", len(manifest_bytes))
    blob += manifest_bytes
    for _, t in named:
        blob += t.value.astype("<f4").tobytes()
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path) -> VlmModel:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r} at byte 0, expected {CHECKPOINT_MAGIC!r}")
    (version,) = struct.unpack("<H", data[4:6])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} at byte 4")
    (manifest_len,) = struct.unpack("<I", data[6:10])
    if 10 + manifest_len > len(data):
        raise FormatError(f"truncated manifest at byte 10 (need {manifest_len} bytes)")
    try:
        manifest = json.loads(data[10 : 10 + manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"unreadable manifest at byte 10: {e}") from e
    model = init_model(ModelConfig(**manifest["config"]), seed=0)
    named = dict(model.named_parameters())
    offset = 10 + manifest_len
    for entry in manifest["blocks"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in named:
            raise FormatError(f"unknown parameter block {name!r} in manifest")
        t = named[name]
        if t.value.shape != shape:
            raise FormatError(f"block {name!r}: manifest shape {shape} != model shape {t.value.shape}")
        n = int(np.prod(shape))
        end = offset + 4 * n
        if end > len(data):
            raise FormatError(f"truncated payload reading {name!r} at byte {offset}")
        t.value = np.frombuffer(data[offset:end], dtype="<f4").astype(np.float64).reshape(shape)
        offset = end
    if offset != len(data):
        raise FormatError(f"trailing {len(data) - offset} bytes at byte {offset}")
    return model
