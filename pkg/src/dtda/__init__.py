"""Dual-teacher distillation with domain-adversarial input perturbation for
face anti-spoofing, at desk scale on synthetic domains."""

__version__ = "0.1.0"
