import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from blockskip.datasets import two_moons
from blockskip.diffusion import make_schedule
from blockskip.model import BlockChainModel, ModelSpec
from blockskip.seeds import stream
from blockskip.teacher import TeacherConfig, train_teacher

TOY_SEED = 20240901
TOY_TEACHER = dict(timesteps=50, blocks=8, width=64, hidden=192,
                   beta_min=0.004, beta_max=0.25)


def make_toy_model(blocks=4, width=16, hidden=32, timesteps=10, seed=0,
                   mode="points", block_kinds=None, frozen=True):
    spec = ModelSpec(mode=mode, blocks=blocks, width=width, hidden=hidden,
                     timesteps=timesteps, block_kinds=block_kinds or [])
    model = BlockChainModel(spec, stream(seed, "toy-model-init"))
    if frozen:
        model.freeze()
    return model


@pytest.fixture(scope="session")
def toy_mask(toy_teacher):
    """Mask trained with the default trainer config on the shared teacher."""
    from blockskip.trainer import TrainerConfig, train_mask

    model, schedule, _ = toy_teacher
    result = train_mask(model, schedule, TrainerConfig(seed=TOY_SEED))
    return result


@pytest.fixture(scope="session")
def toy_teacher():
    """Two-moons teacher shared by the slower end-to-end tests.

    Trained once per session: DDIM-compatible linear schedule with the
    desk-scale default sizes.
    """
    schedule = make_schedule(TOY_TEACHER["timesteps"], TOY_TEACHER["beta_min"],
                             TOY_TEACHER["beta_max"], kind="linear")
    spec = ModelSpec(mode="points", blocks=TOY_TEACHER["blocks"],
                     width=TOY_TEACHER["width"], hidden=TOY_TEACHER["hidden"],
                     timesteps=TOY_TEACHER["timesteps"])
    model = BlockChainModel(spec, stream(TOY_SEED, "teacher-init"))
    data = two_moons(4096, 0.06, stream(TOY_SEED, "teacher-data"))
    curve = train_teacher(model, schedule, data,
                          TeacherConfig(epochs=30, batch_size=128, lr=2e-3,
                                        target_eps_mse=0.26),
                          stream(TOY_SEED, "teacher-train"))
    return model, schedule, curve
