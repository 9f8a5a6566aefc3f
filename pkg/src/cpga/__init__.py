"""Physics-gated multimodal regression of volumetric degree of conversion for TPMS lattices."""

__version__ = "0.1.0"
