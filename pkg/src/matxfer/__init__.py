"""matxfer: exemplar-guided material transfer on procedural toy data.

Pipeline stages: material library with a perceptual distance matrix, toy
shape/dataset synthesis, metric-learned material embedding, classification
heads, exemplar-based image translation, pose selection, and the combined
transfer with consistency-constrained fine-tuning.
"""

__version__ = "0.1.0"
