"""
Mesh module: staggered-grid fields and discrete vector calculus.

Provides:
- Grid, StaggeredVelocity, ForceField, CellScalar
- divergence, gradient, laplacian, convection, trilinear_b
- the discrete Leray projector and L2 / H1_0 norms
- snapshot reading and writing
"""

from .grid import CellScalar, FaceField, ForceField, Grid, StaggeredVelocity
from .operators import (
    convection,
    divergence,
    first_dirichlet_eigenvalue,
    gradient,
    inner_l2,
    laplacian,
    max_divergence,
    norm_h1_semi,
    norm_l2,
    project_divergence_free,
    random_divergence_free,
    trilinear_b,
)
from .loader import read_field, read_force, write_field
