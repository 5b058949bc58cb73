"""Unit tests for the learning-rate schedule, the curriculum and the training loop."""

from pathlib import Path

import numpy as np
import pytest
import torch

from src.app.autodiff import no_grad
from src.app.dataset import FrameDataset
from src.app.errors import DatasetError, FamilyMismatchError, NonFiniteError
from src.app.losses import total_loss
from src.app.scene import build_scene
from src.app.training import Trainer, adam_step, build_optimizer, fit, frame_curriculum, lr_schedule
from tests.helpers import synth_dataset, tiny_batch, tiny_config, tiny_scene

SMALL = {"width": 16, "height": 16, "n_frames": 6, "train": [0, 1, 2, 3], "test": [4, 5]}


@pytest.fixture
def dataset(tmp_path: Path) -> FrameDataset:
    """A six-frame 16x16 pendulum clip."""
    return synth_dataset(tmp_path / "data", "pendulum", **SMALL)


def test_lr_schedule_is_exponential_in_epochs() -> None:
    """r0 at epoch 0, r0 beta after n_decay epochs, fractional in between."""
    assert lr_schedule(0, 1e-3, 0.9, 500) == 1e-3
    assert lr_schedule(500, 1e-3, 0.9, 500) == pytest.approx(9e-4)
    assert lr_schedule(250, 1e-3, 0.9, 500) == pytest.approx(1e-3 * 0.9 ** 0.5)
    assert lr_schedule(1000, 1e-3, 1.0, 500) == 1e-3


@pytest.mark.parametrize("beta,n_decay", [(0.9, 25), (0.99954, 50)])
def test_lr_schedule_decays_strictly(beta: float, n_decay: int) -> None:
    """With beta below one every epoch lowers the rate."""
    rates = [lr_schedule(e, 9e-4, beta, n_decay) for e in range(300)]
    assert all(b < a for a, b in zip(rates, rates[1:]))


def test_frame_curriculum_grows_and_saturates() -> None:
    """The active frame count never shrinks and stops at the total."""
    counts = [frame_curriculum(s, 2, 30, 15) for s in range(1000)]
    assert counts[0] == 2 and counts[29] == 2 and counts[30] == 3
    assert all(b >= a for a, b in zip(counts, counts[1:]))
    assert counts[-1] == 15


def test_optimizer_groups_follow_config() -> None:
    """Two groups with their own rates; only flagged groups decay."""
    config = tiny_config("ball", train={"lr_mlp": 1e-3, "lr_physics": 5e-3, "decay_rate": 0.5,
                                       "decay_steps": 1})
    optimizer, scheduler = build_optimizer(build_scene(config), config.train)
    assert [g["name"] for g in optimizer.param_groups] == ["mlp", "physics"]
    assert [g["lr"] for g in optimizer.param_groups] == [1e-3, 5e-3]
    optimizer.step()
    scheduler.step()
    assert optimizer.param_groups[0]["lr"] == pytest.approx(5e-4)
    assert optimizer.param_groups[1]["lr"] == pytest.approx(5e-3)


def test_adam_step_rejects_non_finite_gradients() -> None:
    """A NaN gradient raises before any parameter moves."""
    scene = build_scene(tiny_config("ball"))
    optimizer, _ = build_optimizer(scene, tiny_config("ball").train)
    named = {n: t for n, t in scene.named_parameters().items() if t.requires_grad}
    before = {n: t.data.detach().clone() for n, t in named.items()}
    for tensor in named.values():
        tensor.data.grad = torch.zeros_like(tensor.data)
    named["z0"].data.grad[0] = float("nan")
    with pytest.raises(NonFiniteError):
        adam_step(optimizer, named)
    assert all(torch.equal(before[n], t.data) for n, t in named.items())


def test_trainer_requires_matching_family(dataset) -> None:
    """A pendulum clip cannot train a ball scene."""
    with pytest.raises(FamilyMismatchError):
        Trainer(build_scene(tiny_config("ball")), dataset, tiny_config("ball"))


def test_trainer_requires_training_frames(dataset) -> None:
    """An empty training split is refused."""
    dataset.train_indices = []
    with pytest.raises(DatasetError):
        Trainer(build_scene(tiny_config()), dataset, tiny_config())


def test_fit_records_history_and_checkpoint(dataset, tmp_path: Path) -> None:
    """One history row per epoch, a growing curriculum and a final checkpoint."""
    config = tiny_config()
    path = tmp_path / "run" / "checkpoint.safetensors"
    result = fit(dataset, build_scene(config), config, checkpoint_path=path)
    history = result.history
    assert len(history) == 2
    assert {"epoch", "step", "active_frames", "photo", "total", "lr_mlp", "lr_physics",
            "l", "c", "phi0"} <= set(history.columns)
    assert history["active_frames"].tolist() == [2, 4]
    assert result.step == 4 + 8
    assert np.isfinite(history["total"]).all()
    assert path.exists()


def test_fit_stops_after_max_steps(dataset) -> None:
    """max_steps cuts the run inside an epoch."""
    config = tiny_config()
    result = fit(dataset, build_scene(config), config, max_steps=3)
    assert result.step == 3
    assert result.epoch == 1


def test_fit_is_deterministic(dataset) -> None:
    """Same seed, same data: identical parameters after ten steps."""
    config = tiny_config(seed=3)
    a = fit(dataset, build_scene(config), config, max_steps=10).scene.named_parameters()
    b = fit(dataset, build_scene(config), config, max_steps=10).scene.named_parameters()
    assert all(torch.equal(a[k].data, b[k].data) for k in a)


def test_training_changes_physics(dataset) -> None:
    """Physical parameters move once the physics group has a rate."""
    config = tiny_config()
    scene = tiny_scene("pendulum")
    before = scene.physical_values()["l"]
    fit(dataset, scene, config, max_steps=2)
    assert scene.physical_values()["l"] != before


def test_epoch_curriculum_unit(dataset) -> None:
    """Counting by epochs keeps two frames active for the first frames_every epochs."""
    config = tiny_config(train={"batch_size": 128, "epochs": 3, "substeps": 4, "frames_start": 2,
                                "frames_every": 2, "curriculum_unit": "epochs"})
    result = Trainer(build_scene(config), dataset, config).fit()
    assert result.history["active_frames"].tolist() == [2, 2, 3]


def test_small_step_lowers_the_loss(dataset) -> None:
    """One Adam step at rate 1e-6 does not increase the loss on its own batch."""
    config = tiny_config(train={"batch_size": 128, "epochs": 1, "substeps": 4, "frames_start": 2,
                                "frames_every": 2, "lr_mlp": 1e-6, "lr_physics": 1e-6})
    trainer = Trainer(tiny_scene("pendulum"), dataset, config)
    batch = tiny_batch(dataset.grid, list(dataset.times[:2]))

    def loss() -> float:
        with no_grad():
            return total_loss(trainer.scene, batch, 0, config.loss).terms["total"]

    before = loss()
    trainer.train_step(batch)
    assert loss() <= before
