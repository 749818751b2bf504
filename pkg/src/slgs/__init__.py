"""Feature-based 3D Gaussian splatting with latent descriptors and neural decoders."""

__version__ = "0.1.0"
