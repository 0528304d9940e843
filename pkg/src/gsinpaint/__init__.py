"""Feed-forward 3D scene inpainting with pixel-aligned Gaussians."""

__version__ = "0.1.0"
