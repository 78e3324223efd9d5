"""Segmented pressure-dynamics simulation and control of a fuel-cell
hydrogen delivery loop: plant model, structured energy form,
energy-shaping tracking controller, sliding-mode state observer,
deterministic scenario runner and CLI."""

from .params import CurrentSplit, StackParams
from .ph_core import EnergyCoeffs

__all__ = ["StackParams", "CurrentSplit", "EnergyCoeffs"]
__version__ = "0.1.0"
