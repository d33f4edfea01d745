"""Planar dexterous tracking: simulator, RL+IL tracking controller and homotopy demonstration mining."""

__version__ = "0.1.0"
