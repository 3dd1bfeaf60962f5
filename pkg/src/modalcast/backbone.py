"""Frozen GPT-2-shaped transformer stack shared by both branches.

The stack itself (attention + MLP blocks, pre-norm, causal by default)
is loaded from a weight container and never trained. Each branch adds
its own positional-embedding table and forecasting head; the temporal
branch may additionally carry LoRA adapters on attention projections.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .container import read_container, write_container
from .errors import CapacityError, ConfigError, ManifestError, ShapeError, UsageError
from .tensor import (Tensor, add, gelu, layer_norm, matmul, mul, reshape,
                     first_rows, softmax, swap_last, transpose)

MLP_RATIO = 4
INIT_STD = 0.02
POS_INIT_STD = 0.01

LORA_TARGETS = ("q", "k", "v", "out")

TEXTUAL = "textual_source"
TEMPORAL = "temporal_target"


@dataclass
class BackboneConfig:
    layers: int = 6
    width: int = 768
    heads: int = 12
    max_positions: int = 1024
    vocab_size: int = 50257
    causal_mask: bool = True

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError(f"backbone needs at least 1 layer, got {self.layers}")
        if self.width % self.heads != 0:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}")


@dataclass
class TransformerBlockParams:
    """One frozen pre-norm block: LN -> attention -> LN -> MLP."""
    ln1_gain: Tensor
    ln1_bias: Tensor
    q_w: Tensor
    q_b: Tensor
    k_w: Tensor
    k_b: Tensor
    v_w: Tensor
    v_b: Tensor
    out_w: Tensor
    out_b: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    fc_w: Tensor
    fc_b: Tensor
    proj_w: Tensor
    proj_b: Tensor

    FIELD_TO_NAME = (
        ("ln1_gain", "ln1.gain"), ("ln1_bias", "ln1.bias"),
        ("q_w", "attn.q_weight"), ("q_b", "attn.q_bias"),
        ("k_w", "attn.k_weight"), ("k_b", "attn.k_bias"),
        ("v_w", "attn.v_weight"), ("v_b", "attn.v_bias"),
        ("out_w", "attn.out_weight"), ("out_b", "attn.out_bias"),
        ("ln2_gain", "ln2.gain"), ("ln2_bias", "ln2.bias"),
        ("fc_w", "mlp.fc_weight"), ("fc_b", "mlp.fc_bias"),
        ("proj_w", "mlp.proj_weight"), ("proj_b", "mlp.proj_bias"),
    )


@dataclass
class LoraAdapter:
    """Low-rank delta on a frozen matrix: effective delta = (alpha/r) * A @ B."""
    target: str
    a: Tensor  # M x r, random Gaussian
    b: Tensor  # r x M, zeros (adapter starts as identity delta)
    alpha: float
    r: int


@dataclass
class BranchParams:
    branch_kind: str
    positional: Tensor          # max_positions x M; trainable on the temporal branch only
    head_w: Tensor              # M x H
    head_b: Tensor              # H
    adapters: dict = field(default_factory=dict)  # (block index, target) -> LoraAdapter
    forward_count: int = 0

    def adapter_for(self, block: int, target: str):
        return self.adapters.get((block, target))


@dataclass
class ForwardTrace:
    """Per-layer hidden features plus the head output for one branch."""
    features: list      # L tensors, each ... x C x M
    output: Tensor      # ... x C x H


@dataclass
class LoadReport:
    missing: list
    extra: list
    warnings: list


class Backbone:
    def __init__(self, config: BackboneConfig, blocks, token_embeddings: Tensor,
                 pos_source: Tensor, load_report: LoadReport | None = None):
        self.config = config
        self.blocks = blocks
        self.token_embeddings = token_embeddings  # vocab x M, frozen
        self.pos_source = pos_source              # max_positions x M, frozen master copy
        self.load_report = load_report or LoadReport([], [], [])

    def frozen_tensors(self):
        """Name -> Tensor for everything the optimizer must never touch."""
        out = {"token_embedding": self.token_embeddings, "pos_embedding": self.pos_source}
        for i, blk in enumerate(self.blocks):
            for fld, suffix in TransformerBlockParams.FIELD_TO_NAME:
                out[f"block.{i}.{suffix}"] = getattr(blk, fld)
        return out


def block_tensor_shapes(config: BackboneConfig) -> dict:
    m = config.width
    h = MLP_RATIO * m
    return {
        "ln1.gain": (m,), "ln1.bias": (m,),
        "attn.q_weight": (m, m), "attn.q_bias": (m,),
        "attn.k_weight": (m, m), "attn.k_bias": (m,),
        "attn.v_weight": (m, m), "attn.v_bias": (m,),
        "attn.out_weight": (m, m), "attn.out_bias": (m,),
        "ln2.gain": (m,), "ln2.bias": (m,),
        "mlp.fc_weight": (m, h), "mlp.fc_bias": (h,),
        "mlp.proj_weight": (h, m), "mlp.proj_bias": (m,),
    }


def manifest(config: BackboneConfig) -> dict:
    """Expected tensor name -> shape for a container holding this config."""
    names = {
        "token_embedding": (config.vocab_size, config.width),
        "pos_embedding": (config.max_positions, config.width),
    }
    per_block = block_tensor_shapes(config)
    for i in range(config.layers):
        for suffix, shape in per_block.items():
            names[f"block.{i}.{suffix}"] = shape
    return names


def _frozen(arr) -> Tensor:
    return Tensor(np.asarray(arr), requires_grad=False)


def load_backbone(path, config: BackboneConfig) -> Backbone:
    """Build a frozen backbone from a weight container.

    Containers holding more blocks than config.layers are legal: the
    leading blocks are used and a warning is issued. Anything missing
    from the manifest is a hard error.
    """
    tensors = read_container(path)
    expected = manifest(config)
    missing = [n for n in expected if n not in tensors]
    if missing:
        raise ManifestError(
            f"{path}: missing tensor {missing[0]!r} "
            f"({len(missing)} of {len(expected)} manifest entries absent)")
    warns = []
    extra = [n for n in tensors if n not in expected]
    surplus_blocks = sorted({n.split(".")[1] for n in extra
                             if n.startswith("block.") and n.split(".")[1].isdigit()})
    if surplus_blocks:
        msg = (f"container holds blocks beyond layer {config.layers - 1} "
               f"(indices {', '.join(surplus_blocks)}); using the first {config.layers}")
        warnings.warn(msg)
        warns.append(msg)
    for name, shape in expected.items():
        if tuple(tensors[name].shape) != tuple(shape):
            raise ConfigError(
                f"{path}: tensor {name!r} has shape {tuple(tensors[name].shape)}, "
                f"config expects {tuple(shape)}")
    blocks = []
    for i in range(config.layers):
        kwargs = {fld: _frozen(tensors[f"block.{i}.{suffix}"])
                  for fld, suffix in TransformerBlockParams.FIELD_TO_NAME}
        blocks.append(TransformerBlockParams(**kwargs))
    return Backbone(
        config,
        blocks,
        token_embeddings=_frozen(tensors["token_embedding"]),
        pos_source=_frozen(tensors["pos_embedding"]),
        load_report=LoadReport(missing=[], extra=extra, warnings=warns),
    )


def save_backbone(backbone: Backbone, path) -> None:
    write_container(path, {n: t.data for n, t in backbone.frozen_tensors().items()})


def random_backbone(config: BackboneConfig, rng: np.random.Generator,
                    dtype=np.float32) -> Backbone:
    """A freshly initialized frozen stack (for desk-scale runs and tests)."""
    m = config.width
    h = MLP_RATIO * m

    def w(*shape):
        return _frozen((rng.standard_normal(shape) * INIT_STD).astype(dtype))

    def zeros(*shape):
        return _frozen(np.zeros(shape, dtype=dtype))

    def ones(*shape):
        return _frozen(np.ones(shape, dtype=dtype))

    blocks = []
    for _ in range(config.layers):
        blocks.append(TransformerBlockParams(
            ln1_gain=ones(m), ln1_bias=zeros(m),
            q_w=w(m, m), q_b=zeros(m), k_w=w(m, m), k_b=zeros(m),
            v_w=w(m, m), v_b=zeros(m), out_w=w(m, m), out_b=zeros(m),
            ln2_gain=ones(m), ln2_bias=zeros(m),
            fc_w=w(m, h), fc_b=zeros(h), proj_w=w(h, m), proj_b=zeros(m),
        ))
    token = w(config.vocab_size, m)
    pos = _frozen((rng.standard_normal((config.max_positions, m)) * POS_INIT_STD).astype(dtype))
    return Backbone(config, blocks, token_embeddings=token, pos_source=pos)


# ---------------------------------------------------------------------------
# attention machinery (also used by the cross-modal match module)
# ---------------------------------------------------------------------------

def split_heads(t: Tensor, heads: int) -> Tensor:
    """(..., C, M) -> (..., heads, C, M // heads)."""
    *lead, c, m = t.shape
    if m % heads != 0:
        raise ShapeError(f"width {m} not divisible by heads {heads}")
    t = reshape(t, (*lead, c, heads, m // heads))
    r = t.ndim
    return transpose(t, tuple(range(r - 3)) + (r - 2, r - 3, r - 1))


def merge_heads(t: Tensor) -> Tensor:
    """(..., heads, C, hd) -> (..., C, heads * hd)."""
    *lead, heads, c, hd = t.shape
    r = t.ndim
    t = transpose(t, tuple(range(r - 3)) + (r - 2, r - 3, r - 1))
    return reshape(t, (*lead, c, heads * hd))


def causal_mask(c: int, dtype=np.float32) -> Tensor:
    """Additive mask forbidding attention to later tokens."""
    return Tensor(np.triu(np.full((c, c), -1e30, dtype=dtype), k=1))


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
                         mask: Tensor | None = None, scale: float | None = None):
    """Scaled dot-product attention; returns (merged output, probabilities).

    Probabilities have shape (..., heads, C_q, C_k) and sum to 1 along
    the last axis. `scale` defaults to 1/sqrt(head_dim).
    """
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[-1] // heads)
    scores = mul(matmul(qh, swap_last(kh)), Tensor(np.asarray(scale, dtype=q.dtype)))
    if mask is not None:
        scores = add(scores, mask)
    probs = softmax(scores, axis=-1)
    return merge_heads(matmul(probs, vh)), probs


def _project(x: Tensor, w: Tensor, b: Tensor, adapter: LoraAdapter | None) -> Tensor:
    y = matmul(x, w) + b
    if adapter is not None:
        delta = matmul(matmul(x, adapter.a), adapter.b)
        y = y + delta * (adapter.alpha / adapter.r)
    return y


def block_forward(x: Tensor, blk: TransformerBlockParams, branch: BranchParams,
                  block_idx: int, heads: int, mask: Tensor | None) -> Tensor:
    h = layer_norm(x, blk.ln1_gain, blk.ln1_bias)
    q = _project(h, blk.q_w, blk.q_b, branch.adapter_for(block_idx, "q"))
    k = _project(h, blk.k_w, blk.k_b, branch.adapter_for(block_idx, "k"))
    v = _project(h, blk.v_w, blk.v_b, branch.adapter_for(block_idx, "v"))
    attn, _ = multi_head_attention(q, k, v, heads, mask=mask)
    x = x + _project(attn, blk.out_w, blk.out_b, branch.adapter_for(block_idx, "out"))
    h2 = layer_norm(x, blk.ln2_gain, blk.ln2_bias)
    return x + (matmul(gelu(matmul(h2, blk.fc_w) + blk.fc_b), blk.proj_w) + blk.proj_b)


def forward_branch(backbone: Backbone, branch: BranchParams, tokens: Tensor) -> ForwardTrace:
    """Run one branch: positions, L blocks (recording each layer), head.

    Accepts (C, M) tokens or a stacked batch (B, C, M).
    """
    cfg = backbone.config
    if tokens.shape[-1] != cfg.width:
        raise ShapeError(f"token width {tokens.shape[-1]} != backbone width {cfg.width}")
    c = tokens.shape[-2]
    if c > cfg.max_positions:
        raise CapacityError(f"{c} tokens exceed positional capacity {cfg.max_positions}")
    branch.forward_count += 1
    mask = causal_mask(c, dtype=tokens.dtype) if cfg.causal_mask else None
    h = tokens + first_rows(branch.positional, c)
    features = []
    for i, blk in enumerate(backbone.blocks):
        h = block_forward(h, blk, branch, i, cfg.heads, mask)
        features.append(h)
    output = matmul(h, branch.head_w) + branch.head_b
    return ForwardTrace(features=features, output=output)


def make_branch(kind: str, backbone: Backbone, horizon: int,
                rng: np.random.Generator, dtype=np.float32) -> BranchParams:
    """Branch-private positional copy and forecasting head.

    The temporal branch's positional table is trainable; the textual
    copy stays frozen so no gradient leaks into the source modality.
    """
    if kind not in (TEXTUAL, TEMPORAL):
        raise UsageError(f"unknown branch kind {kind!r}")
    m = backbone.config.width
    pos = Tensor(backbone.pos_source.data.astype(dtype).copy(),
                 requires_grad=(kind == TEMPORAL))
    head_w = Tensor((rng.standard_normal((m, horizon)) * INIT_STD).astype(dtype),
                    requires_grad=True)
    head_b = Tensor(np.zeros(horizon, dtype=dtype), requires_grad=True)
    return BranchParams(branch_kind=kind, positional=pos, head_w=head_w, head_b=head_b)


def attach_lora(branch: BranchParams, backbone: Backbone, targets=("q", "v"),
                r: int = 8, alpha: float = 16.0,
                rng: np.random.Generator | None = None, dtype=np.float32) -> None:
    """Create one adapter per (block, target) on the temporal branch.

    B starts at zero, so the forward pass is unchanged until training
    moves it.
    """
    if branch.branch_kind != TEMPORAL:
        raise UsageError("LoRA adapters attach to the temporal branch only")
    if r < 1:
        raise UsageError(f"LoRA rank must be >= 1, got {r}")
    bad = [t for t in targets if t not in LORA_TARGETS]
    if bad:
        raise UsageError(f"unknown LoRA targets {bad}; valid: {LORA_TARGETS}")
    if rng is None:
        rng = np.random.default_rng(0)
    m = backbone.config.width
    for i in range(backbone.config.layers):
        for target in targets:
            a = Tensor((rng.standard_normal((m, r)) * INIT_STD).astype(dtype),
                       requires_grad=True)
            b = Tensor(np.zeros((r, m), dtype=dtype), requires_grad=True)
            branch.adapters[(i, target)] = LoraAdapter(target=target, a=a, b=b,
                                                       alpha=alpha, r=r)
