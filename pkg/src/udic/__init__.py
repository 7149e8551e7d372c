"""udic: content-adaptive image compression with per-image latent refinement
and rate-distortion-trained low-rank decoder adapters."""

__version__ = "0.1.0"
