"""Hyperelastic particle simulation: SPH kernel, corotated StVK, actuation, contact, integrators."""

from .integrators import (ImplicitStepInfo, MaterialCotangent, NonFiniteStateError, PressureRamp, SoftScene,
                          SoftState, SoftSystem, SoftTrajectory, simulate_soft, step_implicit, step_leapfrog)
from .kernel import kernel, kernel_grad, sph_density
from .mechanics import (EnergyReport, Ground, InvertedElementError, MaterialBlend, SoftBody, SoftMaterial,
                        SoftPotential, SoftSimError, cofactor, extract_rotation, polar_jvp, polar_vjp, strain,
                        stvk, young_to_lame)

__all__ = [
    "EnergyReport", "Ground", "ImplicitStepInfo", "InvertedElementError", "MaterialBlend", "MaterialCotangent",
    "NonFiniteStateError", "PressureRamp", "SoftBody", "SoftMaterial", "SoftPotential", "SoftScene",
    "SoftSimError", "SoftState", "SoftSystem", "SoftTrajectory", "cofactor", "extract_rotation", "kernel",
    "kernel_grad", "polar_jvp", "polar_vjp", "simulate_soft", "sph_density", "step_implicit", "step_leapfrog",
    "strain", "stvk", "young_to_lame",
]
