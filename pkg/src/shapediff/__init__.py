"""shapediff: desk-scale structurally guided latent diffusion on procedural 3D shapes."""

__version__ = "0.1.0"
