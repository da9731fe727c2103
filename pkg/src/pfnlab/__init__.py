"""In-context tabular classification with a meta-trained transformer, plus a benchmark harness."""

__version__ = "0.1.0"
