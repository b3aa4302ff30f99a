"""Teacher-student diffusion for text-conditioned 3-D hand motion."""

__version__ = "0.1.0"
