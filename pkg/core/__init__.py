"""Numerical engine, model components, data and training for SCGA."""
