"""Ray-surface distance fields trained with multi-view consistency.

Submodules: ``geometry`` (ray parameterization, reprojection, normals),
``scene`` (analytic scenes and ray-cast ground truth), ``dataset`` (scans,
sample stores, visibility pairs), ``nn`` (SIREN networks and Adam),
``training`` (classifier and distance field), ``evaluation`` (rendering and
reports), ``metrics``, ``config`` and ``cli``.
"""

__version__ = "0.1.0"
