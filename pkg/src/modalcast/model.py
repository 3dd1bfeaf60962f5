"""Assembly of the full dual-branch forecaster.

The match module produces time tokens (a shared window embedding plus
channel self-attention); the temporal branch runs them through the
frozen stack with LoRA adapters, the textual branch runs their
cross-attended counterparts through the pristine stack. Inference uses
the temporal branch alone.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import (TEMPORAL, TEXTUAL, Backbone, BranchParams, ForwardTrace,
                       attach_lora, forward_branch, make_branch)
from .container import read_container, write_container
from .errors import ConfigError
from .losses import ProjectionStack, make_projection_stack
from .match import (MatchParams, PrincipalEmbeddings, cross_modal_match,
                    embed_series, make_match_params, mhsa)
from .tensor import Tensor


@dataclass
class ModelOptions:
    input_len: int = 96
    horizon: int = 96
    match_heads: int = 0       # 0 -> backbone head count
    cross_heads: int = 1
    cross_scale: str = "tokens"
    lora_rank: int = 8
    lora_alpha: float = 16.0
    lora_targets: tuple = ("q", "v")


class CrossModalForecaster:
    def __init__(self, backbone: Backbone, principal: PrincipalEmbeddings,
                 match: MatchParams, text_branch: BranchParams,
                 time_branch: BranchParams, proj: ProjectionStack,
                 options: ModelOptions, dtype=np.float32):
        self.backbone = backbone
        self.principal = principal
        self.match = match
        self.text_branch = text_branch
        self.time_branch = time_branch
        self.proj = proj
        self.options = options
        self.dtype = np.dtype(dtype)

    @classmethod
    def build(cls, backbone: Backbone, principal: PrincipalEmbeddings,
              options: ModelOptions, rng: np.random.Generator,
              dtype=np.float32) -> "CrossModalForecaster":
        cfg = backbone.config
        heads = options.match_heads or cfg.heads
        match = make_match_params(options.input_len, cfg.width, heads, rng,
                                  cross_heads=options.cross_heads,
                                  cross_scale=options.cross_scale, dtype=dtype)
        text_branch = make_branch(TEXTUAL, backbone, options.horizon, rng, dtype=dtype)
        time_branch = make_branch(TEMPORAL, backbone, options.horizon, rng, dtype=dtype)
        if options.lora_rank > 0 and options.lora_targets:
            attach_lora(time_branch, backbone, targets=tuple(options.lora_targets),
                        r=options.lora_rank, alpha=options.lora_alpha, rng=rng, dtype=dtype)
        proj = make_projection_stack(cfg.layers, cfg.width, rng, dtype=dtype)
        principal = PrincipalEmbeddings(
            components=principal.components.astype(dtype),
            mean=principal.mean.astype(dtype),
            variances=principal.variances.astype(dtype),
            explained_variance_ratio=principal.explained_variance_ratio,
        )
        return cls(backbone, principal, match, text_branch, time_branch, proj,
                   options, dtype=dtype)

    # ----- forward paths ---------------------------------------------------

    def time_tokens(self, window: Tensor) -> Tensor:
        """(..., T, C) -> (..., C, M) projected time tokens."""
        return mhsa(embed_series(window, self.match), self.match)

    def forward_temporal(self, window: Tensor) -> ForwardTrace:
        """Inference path: the temporal branch only."""
        return forward_branch(self.backbone, self.time_branch, self.time_tokens(window))

    def forward_pair(self, window: Tensor):
        """Training path: both branches plus the cross-attention map."""
        x_time = self.time_tokens(window)
        time_trace = forward_branch(self.backbone, self.time_branch, x_time)
        x_text, attn_map = cross_modal_match(x_time, self.principal, self.match)
        text_trace = forward_branch(self.backbone, self.text_branch, x_text)
        return time_trace, text_trace, attn_map

    @property
    def forward_counts(self) -> dict:
        return {"temporal": self.time_branch.forward_count,
                "textual": self.text_branch.forward_count}

    # ----- parameter bookkeeping -------------------------------------------

    def trainable_parameters(self):
        """Stable (name, tensor) list of everything the optimizer may move.

        Covers the match module (series embedding, self-attention,
        cross-attention), the per-layer projections, the temporal
        positional table, LoRA adapters, and both branch heads. Frozen
        block weights never appear.
        """
        m = self.match
        named = [
            ("match.embed.weight", m.embed_w), ("match.embed.bias", m.embed_b),
            ("match.norm.gain", m.norm_gain), ("match.norm.bias", m.norm_bias),
            ("match.attn.q_weight", m.q_w), ("match.attn.q_bias", m.q_b),
            ("match.attn.k_weight", m.k_w), ("match.attn.k_bias", m.k_b),
            ("match.attn.v_weight", m.v_w), ("match.attn.v_bias", m.v_b),
            ("match.attn.out_weight", m.out_w), ("match.attn.out_bias", m.out_b),
            ("match.cross.q_weight", m.cross_q_w),
            ("match.cross.k_weight", m.cross_k_w),
            ("match.cross.v_weight", m.cross_v_w),
        ]
        for l in range(self.proj.layers):
            named.append((f"proj.{l}.text.weight", self.proj.text[l][0]))
            named.append((f"proj.{l}.text.bias", self.proj.text[l][1]))
            named.append((f"proj.{l}.time.weight", self.proj.time[l][0]))
            named.append((f"proj.{l}.time.bias", self.proj.time[l][1]))
        named.append(("branch.time.pos_embedding", self.time_branch.positional))
        for (block, target), adapter in sorted(self.time_branch.adapters.items()):
            named.append((f"lora.block{block}.{target}.down", adapter.a))
            named.append((f"lora.block{block}.{target}.up", adapter.b))
        named.extend([
            ("branch.time.head.weight", self.time_branch.head_w),
            ("branch.time.head.bias", self.time_branch.head_b),
            ("branch.text.head.weight", self.text_branch.head_w),
            ("branch.text.head.bias", self.text_branch.head_b),
        ])
        assert all(t.requires_grad for _, t in named)
        return named

    def parameter_counts(self) -> dict:
        """Trainable vs frozen parameter totals.

        Frozen weights are counted per logical instantiation: each
        branch runs its own copy of the pretrained stack (storage is
        shared, parameter sets are distinct), the textual branch keeps a
        frozen positional table, and the backbone carries the
        token-embedding dictionary it was loaded with.
        """
        trainable = sum(t.size for _, t in self.trainable_parameters())
        per_stack = sum(getattr(blk, fld).size
                        for blk in self.backbone.blocks
                        for fld, _ in type(blk).FIELD_TO_NAME)
        frozen = 2 * per_stack + self.text_branch.positional.size \
            + self.backbone.token_embeddings.size
        return {"trainable": trainable, "frozen": frozen, "total": trainable + frozen}

    # ----- checkpointing ----------------------------------------------------

    def save_checkpoint(self, path) -> None:
        write_container(path, {name: t.data for name, t in self.trainable_parameters()})

    def load_checkpoint(self, path) -> None:
        """Copy a checkpoint into this model; mismatches are config errors."""
        stored = read_container(path)
        own = dict(self.trainable_parameters())
        problems = []
        for name in own:
            if name not in stored:
                problems.append(f"missing {name} (model shape {own[name].shape})")
            elif tuple(stored[name].shape) != tuple(own[name].shape):
                problems.append(f"{name}: checkpoint {tuple(stored[name].shape)} "
                                f"vs model {tuple(own[name].shape)}")
        for name in stored:
            if name not in own:
                problems.append(f"unexpected {name} {tuple(stored[name].shape)}")
        if problems:
            raise ConfigError(f"{path}: incompatible checkpoint: " + "; ".join(problems))
        for name, tensor in own.items():
            tensor.data = np.ascontiguousarray(stored[name].astype(self.dtype))

    def snapshot(self) -> dict:
        return {name: t.data.copy() for name, t in self.trainable_parameters()}

    def restore(self, snapshot: dict) -> None:
        for name, t in self.trainable_parameters():
            t.data = snapshot[name].copy()
