"""Knowledge amalgamation of segmentation experts into one promptable student."""

__version__ = "0.1.0"
