"""Aerial-ground video person re-identification pipeline.

Three complementary tracklet embedding streams (temporal-spatial,
normalized appearance, multi-scale attention), feature/rank fusion,
a synthetic aerial-ground corpus generator, and a CMC/mAP evaluation
harness with protocol-stratified splits.
"""

__version__ = "0.1.0"
