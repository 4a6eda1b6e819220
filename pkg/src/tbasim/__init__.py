"""Desk-scale simulation of tracking-by-attention supervision: second chance assignment,
track query dropout and the query lifecycle, evaluated with nuScenes-style metrics."""

__version__ = "0.1.0"
