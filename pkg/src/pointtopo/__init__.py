"""Mesh-free interior topology inference with a differentiable particle simulator.

Pipeline: ``geometry`` fills a surface point cloud with particles,
``topology`` maps parameters to a per-particle indicator, ``rigidsim`` and
``softsim`` simulate the body, ``objectives`` compares motion features,
``adjoint`` returns parameter gradients and ``optimizer`` runs the outer
loop. ``cli`` ties these together behind a configuration file.
"""

__version__ = "0.1.0"
