import numpy as np
import pytest
import torch

from objcentric.config import RunConfig
from objcentric.geometry import CameraBatch, look_at, CameraPose


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def small_config(**over) -> RunConfig:
    """A model small enough for unit tests (16 px input, 4x4 feature grid)."""
    doc = {
        "generator": {"image_size": 16, "n_views": 2, "count_range": [1, 2], "n_test": 1},
        "backbone": {"out_channels": 8, "hidden_channels": 8},
        "lim": {"n_slots": 3, "scale_dim": 8, "iters": 3, "mlp_hidden": 16},
        "decoder": {"hidden": 16, "n_layers": 2, "n_freq_fg": 2, "n_freq_bg": 2},
        "sampling": {"n_coarse": 16, "n_fine": 24},
        "perceptual": {"channels": [4, 4]},
        "train": {"epochs": 2, "perc_epoch": 1, "object_centric_epoch": 2, "coarse_res": 8, "depth_pairs": 32},
    }
    for k, v in over.items():
        doc.setdefault(k, {}).update(v)
    return RunConfig.model_validate(doc)


@pytest.fixture
def cfg():
    return small_config()


def simple_camera(eye=(0.0, -4.0, 3.0), target=(0.0, 0.0, 0.0), size=16, focal=20.0) -> CameraPose:
    return CameraPose(look_at(eye, target), np.asarray(eye, float), focal, (size / 2, size / 2), size, size)


@pytest.fixture
def camera():
    return simple_camera()


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.abs(a - b).max() / max(np.abs(b).max(), 1e-12)
