"""Out-of-distribution object detection for LiDAR point clouds.

Modules: ``core`` (types and box geometry), ``pcio`` (file formats),
``detector`` (detector contract and a stub detector), ``inject`` (OOD scene
generation), ``mine`` (unusual-vehicle mining), ``featx`` (feature
extraction), ``flow`` (RealNVP density), ``scorers`` (OOD scores),
``metrics`` (evaluation), ``pipeline`` (experiments) and ``cli``.
"""

__version__ = "0.1.0"
