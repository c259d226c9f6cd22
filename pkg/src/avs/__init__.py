"""avstream - desk-scale streaming joint audio-video generation."""

__version__ = "1.0.0"
