"""Small numpy YOLOv5-style fire detector: autodiff, model, training, data, inference, metrics."""

__version__ = "0.1.0"
