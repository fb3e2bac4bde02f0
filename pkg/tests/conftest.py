"""Shared fixtures.

Desk-scale network training takes minutes, so the trained parameters are
cached under tests/_artifacts keyed by the exact training config; delete
the directory (or set VOXELAST_RETRAIN=1) to force a retrain.
"""

import hashlib
import json
import os
from dataclasses import asdict
from pathlib import Path

import pytest

from voxelast.quadnet import TrainConfig, load_params, save_params, train

ARTIFACTS = Path(__file__).parent / "_artifacts"

DESK_CONFIG = TrainConfig()  # desk-scale defaults, seed 0


def config_key(cfg):
    blob = json.dumps(asdict(cfg), sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def train_cached(cfg):
    ARTIFACTS.mkdir(exist_ok=True)
    path = ARTIFACTS / f"quadnet_d{cfg.order}_{config_key(cfg)}.bin"
    if path.exists() and not os.environ.get("VOXELAST_RETRAIN"):
        return load_params(path, expected_order=cfg.order)
    params, _ = train(cfg)
    save_params(params, path)
    return params


@pytest.fixture(scope="session")
def desk_net_d2():
    """Order-2 network trained at desk scale (cached across runs)."""
    return train_cached(DESK_CONFIG)
