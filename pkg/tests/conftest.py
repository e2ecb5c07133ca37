"""Shared fixtures: a small network config and tiny forged datasets."""

import numpy as np
import pytest

from duelgen import forge
from duelgen.denoiser import NetConfig


def small_net_config(**overrides):
    """A reduced network for fast tests (same structure, fewer channels)."""
    kwargs = dict(base_channels=8, channel_mults=(1, 2), attention_levels=(1,),
                  temporal_levels=(0, 1), heads=2, norm_groups=4,
                  prompt_vocab=64, prompt_dim=16, prompt_len=8)
    kwargs.update(overrides)
    return NetConfig(**kwargs)


@pytest.fixture(scope="session")
def tiny_combat(tmp_path_factory):
    """Three small combat videos (64x48, 12 frames)."""
    root = tmp_path_factory.mktemp("combat")
    config = forge.ForgeConfig(n_videos=3, frames_per_video=12,
                               width=64, height=48, seed=101)
    entries = forge.forge_synthetic(config, root)
    return root, entries


@pytest.fixture(scope="session")
def tiny_fashion(tmp_path_factory):
    """Two small spliced-walker videos matching tiny_combat's canvas."""
    root = tmp_path_factory.mktemp("fashion")
    config = forge.ForgeConfig(n_videos=2, frames_per_video=12,
                               width=64, height=48, seed=202)
    entries = forge.forge_fashion(config, root)
    return root, entries


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
