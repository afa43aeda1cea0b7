"""Bilayer plate bending with Kirchhoff quadrilaterals and a discrete H^2 gradient flow."""
from .mesh import DomainSpec, Mesh, MeshError, Segment, build_mesh, tag_boundary
from .kirchhoff import DeformationField, GradientField, apply_discrete_gradient, interpolate_I2, interpolate_I3
from .energy import EnergyBreakdown, EnergyOperators, InadmissibleStateError, ProblemData, discrete_energy
from .flow import FlowConfig, FlowState, NoConvergenceError, InvariantViolation, classify_shape, run_flow

__version__ = "0.1.0"
