"""Graph-convolutional normalizing flows for node classification and clustering."""

__version__ = "0.1.0"
