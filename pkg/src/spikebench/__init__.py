"""Desk-scale spiking transformer toolkit: neurons, encoders, attention, energy model."""

__version__ = "0.1.0"
