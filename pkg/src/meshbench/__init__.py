"""Desk-scale benchmark for data-driven surrogates of mesh-based PDEs.

Numerical data generation on structured, graded and triangle meshes,
mesh-to-image and mesh-to-graph transforms, small numpy surrogate models
with a reverse-mode autodiff core, and the training and reporting protocol.
"""

__version__ = "0.1.0"
