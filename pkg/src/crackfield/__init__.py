"""Adaptive phase-field fracture solver."""
