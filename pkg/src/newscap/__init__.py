"""Desk-scale entity-aware news image captioning: AoA transformer encoder and
decoder with a visual selective gate, dual-source pointer-generator, tag
cleaning, metrics, and training tooling."""

__version__ = "0.1.0"
