"""Multi-rater mitotic figure consensus, agreement and detection evaluation."""

__version__ = "0.1.0"
