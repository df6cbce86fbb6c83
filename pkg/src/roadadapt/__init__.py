"""Cross-modality unsupervised domain adaptation for freespace detection.

Desk-scale library and CLI: surface-normal generation from depth, cross-modality
guidance, selective adversarial feature alignment, confidence-thresholded
self-training, a synthetic two-domain scene generator, and an evaluation stack.
"""

__version__ = "0.1.0"

__all__ = [
    "alignment",
    "cli",
    "dataio",
    "errors",
    "geometry",
    "guidance",
    "metrics",
    "networks",
    "scenegen",
    "seeding",
    "trainer",
]
