"""PT-moments from local randomized measurements."""

__version__ = "0.1.0"
