"""Self-supervised pretraining and evaluation pipeline for nuclei segmentation.

The package covers the full desk-scale workflow: synthetic dataset
generation, triplet sampling, encoder pretraining with scale-triplet and
count-ranking objectives, encoder transfer into a three-class segmenter,
instance recovery, and AJI/Dice evaluation.
"""

__version__ = "0.1.0"
