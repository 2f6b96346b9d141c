"""Control of a forced particle chain on a line (Toda-type lattices)."""

from .chain import (
    ChainState,
    ControlAffineField,
    ControlSignal,
    PotentialModel,
    Trajectory,
    get_potential,
    simulate,
    toda,
    total_energy,
)

__all__ = [
    "ChainState",
    "ControlAffineField",
    "ControlSignal",
    "PotentialModel",
    "Trajectory",
    "get_potential",
    "simulate",
    "toda",
    "total_energy",
]
