"""nightadapt: a desk-scale day-to-night adaptation lab for segmentation.

A numpy-backed library that trains a tiny student/teacher segmentation
model on procedurally generated day scenes and adapts it to night scenes
via mask-guided class mixup, rare-class memory banks, pseudo-label fusion
and prototype-based feature alignment, with oracle-grade verification of
every gradient.
"""

__version__ = "0.1.0"
