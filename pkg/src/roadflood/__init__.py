"""Road-flood detection pipeline: sensor simulation, water segmentation,
model compression, road intersection and latency accounting."""

__version__ = "0.1.0"
