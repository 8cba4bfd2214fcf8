"""High-throughput organoid timelapse analysis.

Pipeline stages: synthetic benchmark generation (synthgen), raw-frame
preprocessing (preprocess), prompt-propagated organoid segmentation
(segment), per-frame feature extraction (features), multiple-instance
ATP regression (model), and experiment drivers / metrics (evaluate).
"""

__version__ = "0.1.0"
