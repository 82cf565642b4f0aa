"""capengine: controllable image captioning orchestration.

Visual controls (points, boxes, trajectories) become pixel masks through a
pluggable segmenter; masks become captions through a captioner with an
optional visual chain-of-thought; language controls (sentiment, length,
language, factuality) are applied by a text refiner. Object-centric chat and
whole-image paragraph captioning build on the same triplet. Deterministic
mock backends make everything testable offline.
"""

__version__ = "0.1.0"
