"""Scale presets: paper-scale settings and a CPU-tractable desk scale."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class ScalePreset:
    name: str
    train_size: int
    test_size: int
    epochs_per_experience: int
    batch_size: int
    base_lr: float
    eval_subsample: int | None = None
    init_std: float = 0.02


PRESETS = {
    "paper": ScalePreset(
        name="paper",
        train_size=60_000,
        test_size=6_000,
        epochs_per_experience=100,
        batch_size=500,
        base_lr=5e-5,
    ),
    # Non-paper-scale: sized so a 3-experience run finishes on one CPU core.
    # The higher learning rate and wider init compensate for the much smaller
    # step budget; lrs above ~4e-4 never leave the uniform-prediction saddle
    # on this workload, and the wider init shortens the plateau before the
    # binding transition (see notes on the desk preset in the README).
    "desk": ScalePreset(
        name="desk",
        train_size=5_000,
        test_size=1_000,
        epochs_per_experience=50,
        batch_size=250,
        base_lr=3e-4,
        eval_subsample=500,
        init_std=0.05,
    ),
}


def get_preset(name: str) -> ScalePreset:
    try:
        return PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown scale preset {name!r}; choose from {sorted(PRESETS)}")
