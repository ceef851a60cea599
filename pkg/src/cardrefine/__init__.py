"""Shape-refined bi-ventricular segmentation engine on synthetic phantoms."""

__version__ = "0.1.0"
