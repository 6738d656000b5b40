"""
Desk-scale Contrastive Learning (DeskCLR)

Joint intra- and inter-image invariance learning with a momentum memory bank,
online mini-batch k-means pseudo-labels and a margin contrastive loss.
"""

__version__ = "0.1.0"
