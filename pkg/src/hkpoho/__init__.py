"""Calculus of homogeneous Hörmander vector fields and verification of Pohozaev-type identities."""

from .calculus import (
    Functional1,
    Functional2,
    dirichlet_k_laplacian,
    euler_lagrange_1,
    euler_lagrange_2,
    horizontal_biharmonic,
    horizontal_k_laplacian,
    sub_laplacian,
    x_divergence,
    x_gradient,
    x_hessian,
)
from .fields import (
    DilationFamily,
    Family,
    VectorField,
    bony,
    check_H1,
    check_H2,
    euclidean,
    grushin,
    homogeneity_degree,
    lie_bracket,
)
from .geometry import QuadratureSpec, ball3, box, check_star_shaped, disk, ellipse, radial2d
from .identities import (
    audit_nonexistence_order1,
    audit_nonexistence_order2,
    check_boundary_identity_order2,
    verify_poho_order1,
    verify_poho_order2,
    verify_poho_pde,
)
from .symbolic import Expr, differentiate, evaluate, parse, to_prefix

__version__ = "0.1.0"
