"""Semi-supervised teacher-student segmentation of brain vessels from partially annotated 3D volumes."""

__version__ = "0.1.0"
