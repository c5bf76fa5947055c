from __future__ import annotations

import pytest

from rewardsearch.td3 import TD3Config
from rewardsearch.world import WorldConfig


@pytest.fixture(scope="session")
def fast_world() -> WorldConfig:
    return WorldConfig(episode_len=40)


@pytest.fixture(scope="session")
def tiny_td3() -> TD3Config:
    # Small nets and few steps: enough to exercise every code path
    # (warmup, updates, delayed policy steps, episode logging) in well
    # under a second per training call.
    return TD3Config(
        hidden=(16, 16),
        batch_size=32,
        warmup_steps=64,
        train_steps=300,
        buffer_size=4096,
    )
