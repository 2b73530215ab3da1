"""Simulation of SDEs with discontinuous drift and degenerate diffusion.

The drift discontinuity is removed by an explicit change of variables
(:mod:`zvonkin.transform`), the transformed system is simulated by
Euler-Maruyama, and paths are mapped back.
"""

__version__ = "0.1.0"
