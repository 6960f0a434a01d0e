"""NumPy EfficientNet classifier with snapshot ensembles, Grad-CAM and evaluation metrics."""

__version__ = "0.1.0"
