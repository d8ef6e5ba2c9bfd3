"""Pose-invariant person re-identification toolkit.

The pipeline synthesizes each person in a set of canonical poses derived by
clustering detected body keypoints, extracts descriptors of the original and
synthesized views, and fuses them into a single viewpoint-invariant feature
used for gallery retrieval.
"""

__version__ = "0.1.0"
