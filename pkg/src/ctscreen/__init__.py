"""ctscreen: volumetric chest-CT screening pipeline.

Lung segmentation, multi-resolution patch extraction, a from-scratch 3D CNN
with progressive input resizing, and the evaluation stack around it.
"""

__version__ = "0.1.0"
