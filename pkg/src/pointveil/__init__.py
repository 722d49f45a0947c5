"""Key-based privacy protection for 3D point clouds with Gaussian-mixture normalizing flows."""

__version__ = "0.1.0"
