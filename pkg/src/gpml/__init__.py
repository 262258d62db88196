"""Pseudo-label augmented gradient-based meta-learning (GP-MAML / GP-ANIL / GP-BOIL)."""

__version__ = "0.1.0"
