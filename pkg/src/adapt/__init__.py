"""Anchored multimodal representation learning with masked attention fusion.

Pipeline: modality encoders contrastively aligned to a frozen anchor,
a masked multimodal transformer fusing any available subset of modalities
into a single [CLS] representation, a linear probe on top, and an
evaluation harness for missing-modality scenarios.
"""

__version__ = "0.1.0"
