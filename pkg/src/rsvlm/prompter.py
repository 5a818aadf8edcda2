"""Multi-level visual prompter: learnable aggregation tokens attend to the
user query (self-attention over the concatenation), then to the retrieved
semantic tokens, then to each visual level in parallel, and the per-level
outputs are stacked row-wise into the prompt matrix.

Attention blocks are multi-head with bias-free Q/K/V/output projections,
residual connections, and parameter-free layer normalization applied to the
query-side input of each block. Multi-head splitting is expressed on 2-D
matrices by column blocks: head h owns columns [h*dk, (h+1)*dk) of the
projected Q/K/V, where dk = d / heads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError
from .numerics import Rng

AGG_INIT_STD = 0.02


@dataclass
class PrompterConfig:
    n_agg: int
    dim: int
    levels: int
    heads: int
    level_dims: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.level_dims:
            self.level_dims = [self.dim] * self.levels
        problems = []
        if self.n_agg < 1:
            problems.append(f"n_agg must be >= 1, got {self.n_agg}")
        if self.heads < 1 or self.dim % self.heads != 0:
            problems.append(f"dim {self.dim} not divisible by heads {self.heads}")
        if len(self.level_dims) != self.levels:
            problems.append(f"level_dims length {len(self.level_dims)} != levels {self.levels}")
        if problems:
            raise ShapeError("; ".join(problems))


@dataclass
class AttnBlockParams:
    """Bias-free projections of one attention block. wk/wv map the context
    dimension to the block dimension, so cross-attention over d_l-dim visual
    features just uses rectangular wk/wv."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor

    def named(self, prefix: str):
        return [(f"{prefix}.wq", self.wq), (f"{prefix}.wk", self.wk),
                (f"{prefix}.wv", self.wv), (f"{prefix}.wo", self.wo)]


@dataclass
class PrompterParams:
    config: PrompterConfig
    f_agg: Tensor
    self_attn: AttnBlockParams
    sem_attn: AttnBlockParams
    level_attn: list[AttnBlockParams]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("f_agg", self.f_agg)]
        out += self.self_attn.named("self_attn")
        out += self.sem_attn.named("sem_attn")
        for l, block in enumerate(self.level_attn, start=1):
            out += block.named(f"level_attn{l}")
        return out


@dataclass
class PromptInputs:
    f_user: np.ndarray      # N_u x d user query tokens
    f_semantic: np.ndarray  # N_s x d retrieved semantic tokens
    f_vis: list[np.ndarray]  # level l: N_l x d_l visual features


def init_attn_block(d_q_in: int, d_ctx_in: int, d: int, rng: Rng) -> AttnBlockParams:
    """Fan-in scaled Gaussian init for all four projections."""
    return AttnBlockParams(
        wq=ad.param(rng.normal((d_q_in, d), std=1.0 / math.sqrt(d_q_in))),
        wk=ad.param(rng.normal((d_ctx_in, d), std=1.0 / math.sqrt(d_ctx_in))),
        wv=ad.param(rng.normal((d_ctx_in, d), std=1.0 / math.sqrt(d_ctx_in))),
        wo=ad.param(rng.normal((d, d), std=1.0 / math.sqrt(d))),
    )


def init_prompter(cfg: PrompterConfig, rng: Rng) -> PrompterParams:
    return PrompterParams(
        config=cfg,
        f_agg=ad.param(rng.spawn(0).normal((cfg.n_agg, cfg.dim), std=AGG_INIT_STD)),
        self_attn=init_attn_block(cfg.dim, cfg.dim, cfg.dim, rng.spawn(1)),
        sem_attn=init_attn_block(cfg.dim, cfg.dim, cfg.dim, rng.spawn(2)),
        level_attn=[
            init_attn_block(cfg.dim, cfg.level_dims[l], cfg.dim, rng.spawn(10 + l))
            for l in range(cfg.levels)
        ],
    )


def attention_output(block: AttnBlockParams, q_in: Tensor, ctx: Tensor, heads: int,
                     causal_bias: np.ndarray | None = None) -> Tensor:
    """Multi-head attention without residual: project, split columns into
    heads, scaled-dot attention per head, concatenate, output-project."""
    d = block.wq.value.shape[1]
    if d % heads != 0:
        raise ShapeError(f"attention: dim {d} not divisible by heads {heads}")
    if q_in.value.shape[1] != block.wq.value.shape[0]:
        raise ShapeError(
            f"attention: query dim {q_in.value.shape[1]} != wq rows {block.wq.value.shape[0]}"
        )
    if ctx.value.shape[1] != block.wk.value.shape[0]:
        raise ShapeError(
            f"attention: context dim {ctx.value.shape[1]} != wk rows {block.wk.value.shape[0]}"
        )
    dk = d // heads
    q = ad.matmul(q_in, block.wq)
    k = ad.matmul(ctx, block.wk)
    v = ad.matmul(ctx, block.wv)
    inv_sqrt = 1.0 / math.sqrt(dk)
    head_outs = []
    for h in range(heads):
        qh = ad.narrow(q, 1, h * dk, dk)
        kh = ad.narrow(k, 1, h * dk, dk)
        vh = ad.narrow(v, 1, h * dk, dk)
        scores = ad.scale(ad.matmul(qh, ad.transpose(kh)), inv_sqrt)
        if causal_bias is not None:
            scores = scores + ad.const(causal_bias)
        head_outs.append(ad.matmul(ad.softmax_rows(scores), vh))
    return ad.matmul(ad.concat(head_outs, axis=1), block.wo)


def aggregate_query_graph(params: PrompterParams, f_user: Tensor) -> Tensor:
    cfg = params.config
    if f_user.value.shape[1] != cfg.dim:
        raise ShapeError(f"aggregate_query: f_user dim {f_user.value.shape[1]} != {cfg.dim}")
    f_in = ad.concat([params.f_agg, f_user], axis=0)
    f_out = f_in + attention_output(params.self_attn, ad.layer_norm_rows(f_in), f_in, cfg.heads)
    return ad.narrow(f_out, 0, 0, cfg.n_agg)


def attend_semantics_graph(params: PrompterParams, z1: Tensor, f_semantic: Tensor) -> Tensor:
    cfg = params.config
    if f_semantic.value.shape[1] != cfg.dim:
        raise ShapeError(f"attend_semantics: semantic dim {f_semantic.value.shape[1]} != {cfg.dim}")
    return z1 + attention_output(params.sem_attn, ad.layer_norm_rows(z1), f_semantic, cfg.heads)


def attend_level_graph(params: PrompterParams, z2: Tensor, f_vis_l: Tensor, level: int) -> Tensor:
    cfg = params.config
    if not 1 <= level <= cfg.levels:
        raise ShapeError(f"attend_level: level {level} out of range 1..{cfg.levels}")
    expected = cfg.level_dims[level - 1]
    if f_vis_l.value.shape[1] != expected:
        raise ShapeError(
            f"attend_level: level {level} features have dim {f_vis_l.value.shape[1]}, expected {expected}"
        )
    block = params.level_attn[level - 1]
    return z2 + attention_output(block, ad.layer_norm_rows(z2), f_vis_l, cfg.heads)


def build_prompt_graph(params: PrompterParams, f_user: Tensor, f_semantic: Tensor,
                       f_vis: list[Tensor]) -> Tensor:
    cfg = params.config
    if len(f_vis) != cfg.levels:
        raise ShapeError(f"build_prompt: got {len(f_vis)} visual levels, expected {cfg.levels}")
    z1 = aggregate_query_graph(params, f_user)
    z2 = attend_semantics_graph(params, z1, f_semantic)
    blocks = [attend_level_graph(params, z2, f_vis[l - 1], l) for l in range(1, cfg.levels + 1)]
    return ad.concat(blocks, axis=0)


def aggregate_query(params: PrompterParams, f_user) -> np.ndarray:
    """Self-attend concat(f_agg, f_user) and keep the aggregation rows."""
    return aggregate_query_graph(params, ad.const(np.asarray(f_user, dtype=np.float64))).value


def attend_semantics(params: PrompterParams, z1, f_semantic) -> np.ndarray:
    return attend_semantics_graph(
        params, ad.const(np.asarray(z1, dtype=np.float64)),
        ad.const(np.asarray(f_semantic, dtype=np.float64))
    ).value


def attend_level(params: PrompterParams, z2, f_vis_l, level: int) -> np.ndarray:
    return attend_level_graph(
        params, ad.const(np.asarray(z2, dtype=np.float64)),
        ad.const(np.asarray(f_vis_l, dtype=np.float64)), level
    ).value


def build_prompt(params: PrompterParams, inputs: PromptInputs) -> np.ndarray:
    """Prompt matrix of shape (n_agg * levels, dim); row block l comes from
    visual level l (level order preserved)."""
    f_user = np.asarray(inputs.f_user, dtype=np.float64)
    f_semantic = np.asarray(inputs.f_semantic, dtype=np.float64)
    f_vis = [np.asarray(f, dtype=np.float64) for f in inputs.f_vis]
    if f_user.shape[0] < 1 or f_semantic.shape[0] < 1:
        raise ShapeError("build_prompt: f_user and f_semantic must be nonempty")
    for l, f in enumerate(f_vis, start=1):
        if f.shape[0] < 1:
            raise ShapeError(f"build_prompt: visual level {l} is empty")
    return build_prompt_graph(
        params,
        ad.const(f_user),
        ad.const(f_semantic),
        [ad.const(f) for f in f_vis],
    ).value


def prompt_shape(cfg: PrompterConfig) -> tuple[int, int]:
    """Shape contract of build_prompt: (n_agg * levels, dim)."""
    return (cfg.n_agg * cfg.levels, cfg.dim)
