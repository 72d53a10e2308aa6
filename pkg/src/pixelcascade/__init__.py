"""pixelcascade: horizontal-cascade encoder networks for pixel labeling.

A desk-scale, self-contained implementation of cascaded-encoder networks for
salient-object segmentation, edge detection and skeleton extraction: a small
float64 autodiff engine, a VGG-style trunk, a declarative graph DSL with a
validator and compiler, two decoder forms, SGD training presets, the full
boundary/region evaluation stack, and a synthetic dataset generator.
"""

__version__ = "0.1.0"
