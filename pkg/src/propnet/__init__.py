"""Propagate one annotated CT slice to a 3D tumor segmentation."""

__version__ = "0.1.0"
