"""Scanline trajectory extraction from spatial-temporal maps.

STMap construction, DMD background separation, automatic labeling, a numpy
Res-UNet+ segmenter, strand-to-trajectory conversion and evaluation metrics.
"""

__version__ = "0.1.0"
