"""Differentiable learned rigid-body simulation with mesh graph networks.

Subpackages and modules: ``geom`` (meshes, poses, quaternions), ``collide``
(GJK/EPA and contact pairs), ``teacher`` (compliant-contact simulator),
``sysid`` (parameter identification), ``datagen`` (synthetic datasets),
``gnn`` (learned simulator), ``optimctl`` (push optimization) and ``cli``.
"""
__version__ = "0.1.0"
