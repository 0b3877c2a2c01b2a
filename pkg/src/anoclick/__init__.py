"""anoclick: interactive click-driven anomaly labeling and automatic segmentation."""

__version__ = "0.1.0"
