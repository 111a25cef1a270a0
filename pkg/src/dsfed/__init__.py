"""dsfed: desk-scale dual-scale federated segmentation simulator."""

__version__ = "0.1.0"
