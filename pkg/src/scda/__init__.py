"""Source-free collaborative domain adaptation for ROI time series represented as dynamic graphs."""

__version__ = "0.1.0"
