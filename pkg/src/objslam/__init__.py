"""Object-level SLAM with an exact SE(3)-equivariant latent surrogate."""

__version__ = "0.1.0"
