"""Geospatial-economic scoring engine.

Aligns satellite tiles with street-view images, scores them with a
two-branch ViT + cross-attention fusion model trained against nightlight
proxies, and aggregates grid scores to county polygons through a staged
parallel pipeline, a REST service, and a CLI.
"""

__version__ = "0.1.0"
