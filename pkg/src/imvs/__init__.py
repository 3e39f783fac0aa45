"""Neural implicit multi-view stereo at desk scale.

Learns signed-distance geometry and view-dependent texture from posed
synthetic pseudo images via differentiable sphere tracing, with an
uncertainty module that down-weights unreliable image regions, and a
latent-code filter that isolates viewpoint directions in a style space.
"""

__version__ = "0.1.0"

from . import ad, fields, geom, losses, recon, render, train, viewgen  # noqa: F401
