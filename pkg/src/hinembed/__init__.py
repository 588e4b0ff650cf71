"""Heterogeneous-graph embeddings: partitioned translation-dot training, cluster
mixtures, inner-product retrieval, product quantization and version-stable retraining."""

__version__ = "0.1.0"
