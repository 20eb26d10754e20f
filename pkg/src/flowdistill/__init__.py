"""Desk-scale flow-model distillation: continuous-time consistency
distillation, adversarial distribution alignment and preference-based
trajectory alignment on toy data."""

__version__ = "0.1.0"
