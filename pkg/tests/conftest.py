import numpy as np
import pytest

from modalcast.backbone import BackboneConfig, random_backbone
from modalcast.match import WordEmbeddingDict, extract_principal_embeddings
from modalcast.model import CrossModalForecaster, ModelOptions


def build_tiny_model(layers=2, width=32, heads=4, input_len=16, horizon=8,
                     vocab=60, max_positions=64, d=6, seed=0, dtype=np.float64,
                     causal=True, cross_heads=1, cross_scale="tokens",
                     lora_rank=4, lora_targets=("q", "v")):
    """Small full model on a random frozen backbone (float64 by default
    so the verification suite can run finite differences against it)."""
    rng = np.random.default_rng(seed)
    config = BackboneConfig(layers=layers, width=width, heads=heads,
                            max_positions=max_positions, vocab_size=vocab,
                            causal_mask=causal)
    backbone = random_backbone(config, rng, dtype=dtype)
    dictionary = WordEmbeddingDict(matrix=backbone.token_embeddings.data)
    principal = extract_principal_embeddings(dictionary, d)
    options = ModelOptions(input_len=input_len, horizon=horizon,
                           cross_heads=cross_heads, cross_scale=cross_scale,
                           lora_rank=lora_rank, lora_targets=lora_targets)
    return CrossModalForecaster.build(backbone, principal, options, rng, dtype=dtype)


@pytest.fixture
def tiny_model():
    return build_tiny_model()


def synthetic_series(n=400, channels=3, seed=0, trend=0.01, noise=0.05):
    """Sinusoids + trend + noise, shaped like a loaded CSV dataset."""
    from datetime import datetime, timedelta

    from modalcast.data import SeriesDataset

    rng = np.random.default_rng(seed)
    t = np.arange(n)
    cols = []
    for c in range(channels):
        period = 24 * (c + 1)
        phase = rng.uniform(0, 2 * np.pi)
        col = (np.sin(2 * np.pi * t / period + phase)
               + trend * t * (c + 1) / channels
               + noise * rng.standard_normal(n))
        cols.append(col)
    values = np.stack(cols, axis=1).astype(np.float32)
    start = datetime(2020, 1, 1)
    stamps = [(start + timedelta(hours=int(i))).isoformat(sep=" ") for i in range(n)]
    return SeriesDataset(channels=[f"ch{c}" for c in range(channels)],
                         values=values, timestamps=stamps, name="synthetic")
