"""Flow-based motion-primitive planning with prior-space collision masking."""

__version__ = "0.1.0"
