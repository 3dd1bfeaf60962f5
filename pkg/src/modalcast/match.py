"""Cross-modal match machinery.

Turns a T x C window into C channel tokens (one shared linear map per
channel plus self-attention), and aligns those time tokens to the
language modality by cross-attending into a compressed word-embedding
dictionary. The compression is an offline PCA over the dictionary rows,
persisted to a weight container and reused across runs.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .backbone import multi_head_attention
from .container import read_container, write_container
from .errors import ManifestError, ShapeError, UsageError
from .tensor import Tensor, layer_norm, matmul, swap_last, softmax

CROSS_SCALES = ("tokens", "head_dim")


@dataclass
class WordEmbeddingDict:
    """The source model's token-embedding matrix, plus optional token strings."""
    matrix: np.ndarray            # vocab x M
    tokens: list | None = None    # row i -> token string, when available

    def __post_init__(self):
        if self.tokens is not None and len(self.tokens) != self.matrix.shape[0]:
            raise UsageError(
                f"token list length {len(self.tokens)} != vocabulary {self.matrix.shape[0]}")


@dataclass
class PrincipalEmbeddings:
    """Variance-scaled principal directions of the centered dictionary."""
    components: np.ndarray          # d x M
    mean: np.ndarray                # M, centering offset
    variances: np.ndarray           # d, per-component variance
    explained_variance_ratio: float

    @property
    def d(self) -> int:
        return self.components.shape[0]


@dataclass
class MatchParams:
    """Trainable weights of the match module (all of them train)."""
    embed_w: Tensor      # T x M, shared channel-wise map
    embed_b: Tensor      # M
    norm_gain: Tensor    # M, pre-norm of the self-attention block
    norm_bias: Tensor
    q_w: Tensor          # self-attention projections, M x M each
    q_b: Tensor
    k_w: Tensor
    k_b: Tensor
    v_w: Tensor
    v_b: Tensor
    out_w: Tensor
    out_b: Tensor
    cross_q_w: Tensor    # cross-attention projections, M x M, no bias
    cross_k_w: Tensor
    cross_v_w: Tensor
    heads: int = 1           # self-attention head count
    cross_heads: int = 1     # cross-attention head count
    cross_scale: str = "tokens"  # "tokens": 1/sqrt(C); "head_dim": 1/sqrt(M/heads)


def make_match_params(input_len: int, width: int, heads: int, rng: np.random.Generator,
                      cross_heads: int = 1, cross_scale: str = "tokens",
                      dtype=np.float32, init_std: float = 0.02) -> MatchParams:
    if cross_scale not in CROSS_SCALES:
        raise UsageError(f"cross_scale must be one of {CROSS_SCALES}, got {cross_scale!r}")

    def w(*shape):
        return Tensor((rng.standard_normal(shape) * init_std).astype(dtype), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    m = width
    return MatchParams(
        embed_w=w(input_len, m), embed_b=zeros(m),
        norm_gain=Tensor(np.ones(m, dtype=dtype), requires_grad=True), norm_bias=zeros(m),
        q_w=w(m, m), q_b=zeros(m), k_w=w(m, m), k_b=zeros(m),
        v_w=w(m, m), v_b=zeros(m), out_w=w(m, m), out_b=zeros(m),
        cross_q_w=w(m, m), cross_k_w=w(m, m), cross_v_w=w(m, m),
        heads=heads, cross_heads=cross_heads, cross_scale=cross_scale,
    )


# ---------------------------------------------------------------------------
# offline principal-embedding extraction
# ---------------------------------------------------------------------------

def extract_principal_embeddings(dictionary: WordEmbeddingDict, d: int,
                                 scaled: bool = True) -> PrincipalEmbeddings:
    """Top-d principal directions of the dictionary's row distribution.

    Rows of the result are the principal directions scaled by the
    corresponding singular value / sqrt(n - 1) (their standard
    deviation), so cluster energy survives into the attention dot
    products; `scaled=False` keeps them orthonormal. Rank-deficient
    dictionaries yield only the available components, with a warning.
    """
    mat = np.asarray(dictionary.matrix)
    if mat.ndim != 2:
        raise UsageError(f"dictionary matrix must be 2-D, got shape {mat.shape}")
    n, m = mat.shape
    if not 1 <= d <= min(n, m):
        raise UsageError(f"d={d} out of range [1, {min(n, m)}] for a {n} x {m} dictionary")
    mean = mat.mean(axis=0, dtype=np.float64)
    centered = mat.astype(np.float64) - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    variances = s * s / max(n - 1, 1)
    total = float(variances.sum())
    # rank tolerance follows the dictionary's own precision, not the f64 workspace
    in_eps = np.finfo(mat.dtype).eps if mat.dtype in (np.float32, np.float64) \
        else np.finfo(np.float64).eps
    tol = s[0] * max(n, m) * in_eps if s.size else 0.0
    rank = int((s > tol).sum())
    if d > rank:
        warnings.warn(f"requested d={d} exceeds dictionary rank {rank}; clamping")
        d = rank
    comps = vt[:d]
    if scaled:
        comps = comps * (s[:d] / math.sqrt(max(n - 1, 1)))[:, None]
    evr = float(variances[:d].sum() / total) if total > 0 else 1.0
    out_dtype = mat.dtype if mat.dtype in (np.float32, np.float64) else np.float32
    return PrincipalEmbeddings(
        components=comps.astype(out_dtype),
        mean=mean.astype(out_dtype),
        variances=variances[:d].astype(out_dtype),
        explained_variance_ratio=evr,
    )


def save_principal(pe: PrincipalEmbeddings, path) -> None:
    write_container(path, {
        "principal.components": pe.components,
        "principal.mean": pe.mean,
        "principal.variances": pe.variances,
        "principal.evr": np.asarray(pe.explained_variance_ratio, dtype=np.float64),
    })


def load_principal(path) -> PrincipalEmbeddings:
    tensors = read_container(path)
    required = ("principal.components", "principal.mean", "principal.variances", "principal.evr")
    for name in required:
        if name not in tensors:
            raise ManifestError(f"{path}: missing tensor {name!r}")
    return PrincipalEmbeddings(
        components=tensors["principal.components"],
        mean=tensors["principal.mean"],
        variances=tensors["principal.variances"],
        explained_variance_ratio=float(tensors["principal.evr"]),
    )


def dictionary_from_container(path, vocab_path=None) -> WordEmbeddingDict:
    """Pull the token-embedding matrix (and optional token list) from a container."""
    tensors = read_container(path)
    if "token_embedding" not in tensors:
        raise ManifestError(f"{path}: missing tensor 'token_embedding'")
    tokens = None
    if vocab_path is not None:
        with open(vocab_path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh]
    return WordEmbeddingDict(matrix=tensors["token_embedding"], tokens=tokens)


# ---------------------------------------------------------------------------
# forward operations
# ---------------------------------------------------------------------------

def embed_series(window: Tensor, params: MatchParams) -> Tensor:
    """Channel-as-token embedding: (T, C) -> (C, M), batched (B, T, C) -> (B, C, M).

    Every channel's length-T history goes through the same linear map.
    """
    t_len = params.embed_w.shape[0]
    if window.shape[-2] != t_len:
        raise ShapeError(f"window length {window.shape[-2]} != configured input length {t_len}")
    channels_first = swap_last(window)
    return matmul(channels_first, params.embed_w) + params.embed_b


def mhsa(tokens: Tensor, params: MatchParams) -> Tensor:
    """Full self-attention over channel tokens: one pre-norm block, residual, no MLP."""
    h = layer_norm(tokens, params.norm_gain, params.norm_bias)
    q = matmul(h, params.q_w) + params.q_b
    k = matmul(h, params.k_w) + params.k_b
    v = matmul(h, params.v_w) + params.v_b
    attn, _ = multi_head_attention(q, k, v, params.heads)
    return tokens + (matmul(attn, params.out_w) + params.out_b)


def _cross_scale_value(params: MatchParams, n_tokens: int) -> float:
    if params.cross_scale == "tokens":
        return 1.0 / math.sqrt(n_tokens)
    return 1.0 / math.sqrt(params.cross_q_w.shape[0] // params.cross_heads)


def cross_modal_match(x_time: Tensor, principal: PrincipalEmbeddings,
                      params: MatchParams):
    """Cross-attend time tokens into the principal word embeddings.

    Queries come from the time tokens, keys and values from the
    compressed dictionary. Returns (text tokens, attention map); the
    map is head-averaged to shape (..., C, d) and rows sum to 1.
    """
    if x_time.shape[-1] != principal.components.shape[1]:
        raise ShapeError(
            f"token width {x_time.shape[-1]} != principal width {principal.components.shape[1]}")
    keys_src = Tensor(principal.components.astype(x_time.dtype, copy=False))
    q = matmul(x_time, params.cross_q_w)
    k = matmul(keys_src, params.cross_k_w)
    v = matmul(keys_src, params.cross_v_w)
    scale = _cross_scale_value(params, x_time.shape[-2])
    x_text, probs = multi_head_attention(q, k, v, params.cross_heads, scale=scale)
    attn_map = probs.mean(axis=-3) if probs.shape[-3] > 1 else probs.reshape(
        probs.shape[:-3] + probs.shape[-2:])
    return x_text, attn_map


def word_relevance(x_time: Tensor, word_vectors, params: MatchParams) -> Tensor:
    """Per-channel attention over a hand-picked set of raw embedding rows.

    Uses the trained cross-attention query/key maps and the same
    temperature as the match itself; rows sum to 1.
    """
    words = word_vectors if isinstance(word_vectors, Tensor) else Tensor(np.asarray(word_vectors))
    if words.ndim != 2 or words.shape[0] == 0:
        raise UsageError(f"word selection must be a nonempty S x M matrix, got {words.shape}")
    if words.shape[-1] != x_time.shape[-1]:
        raise ShapeError(f"word width {words.shape[-1]} != token width {x_time.shape[-1]}")
    q = matmul(x_time, params.cross_q_w)
    k = matmul(Tensor(words.data.astype(x_time.dtype, copy=False)), params.cross_k_w)
    scale = _cross_scale_value(params, x_time.shape[-2])
    if params.cross_heads == 1:
        scores = matmul(q, swap_last(k)) * scale
        return softmax(scores, axis=-1)
    from .backbone import split_heads  # local import keeps module init light
    qh, kh = split_heads(q, params.cross_heads), split_heads(k, params.cross_heads)
    probs = softmax(matmul(qh, swap_last(kh)) * scale, axis=-1)
    return probs.mean(axis=-3)
