"""Late fusion of a frozen image-text encoder with a motion-vector TSN classifier."""

__version__ = "0.1.0"

APPEARANCE_DIM = 512
MOTION_DIM = 1280
FUSED_DIM = APPEARANCE_DIM + MOTION_DIM
