"""Multi-view contrastive representation learning for 3D lesion volumes."""

__version__ = "0.1.0"
