"""Shape-space deformer: a hypernetwork-conditioned nearest-surface displacement field."""

__version__ = "0.1.0"
