"""CrossCoherence: text-to-shape coherence scoring with bilateral cross-attention."""

__version__ = "0.1.0"
