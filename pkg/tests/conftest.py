"""Shared fixtures: session-scoped synthetic corpora reused across test modules."""

from __future__ import annotations

import numpy as np
import pytest

from geoscore.dataio import SynthConfig, synth_corpus
from geoscore.dataio.synth import CorpusPaths
from geoscore.geo import BBox, GeoPoint

SMALL_REGION = BBox(GeoPoint(30.0, 114.0), GeoPoint(30.65, 114.9))


def small_synth_config(seed: int = 7, n_pairs: int = 40) -> SynthConfig:
    """Desk-size corpus: small native images, ~60-tile region."""
    return SynthConfig(
        seed=seed,
        n_pairs=n_pairs,
        region=SMALL_REGION,
        sv_per_tile=2,
        sat_size=64,
        sv_width=96,
        sv_height=64,
    )


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory) -> CorpusPaths:
    root = tmp_path_factory.mktemp("corpus-small")
    synth_corpus(root, small_synth_config())
    return CorpusPaths(root)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def tiny_checkpoint(tmp_path_factory):
    """A saved micro model: scores vary with input but carry no meaning."""
    from geoscore.model import LabelScaler, ModelConfig, init_model, save_model

    cfg = ModelConfig(
        image_side=32,
        patch_side=8,
        hidden_dim=16,
        num_encoder_layers=1,
        num_heads=2,
        head_hidden=8,
        dropout_rate=0.0,
    )
    model = init_model(cfg, np.random.default_rng(3))
    noise = np.random.default_rng(4)
    for p in model.parameters():
        p.data = p.data + noise.normal(scale=0.05, size=p.data.shape)
    path = tmp_path_factory.mktemp("ckpt") / "model"
    stats = {"mean": [0.5, 0.5, 0.5], "std": [0.25, 0.25, 0.25]}
    save_model(path, model, LabelScaler(0.0, 1.0), preprocess={"satellite": stats, "streetview": stats})
    return path
