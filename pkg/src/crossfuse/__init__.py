"""Point-wise cross-layer attention fusion with a from-scratch autodiff core."""

__version__ = "0.1.0"
