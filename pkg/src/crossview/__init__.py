"""Cross-view identity matching via adversarially adapted per-view embeddings."""

__version__ = "0.1.0"
