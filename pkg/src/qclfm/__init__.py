"""Simulation and reconstruction for quantum-correlation light-field microscopy.

Entangled photon pairs are generated, sent through a microscope model and an
event-camera model, paired by arrival time, and refocused digitally with a
ray-trace rebinning step followed by Gerchberg-Saxton amplitude retrieval.
"""

__version__ = "0.1.0"
