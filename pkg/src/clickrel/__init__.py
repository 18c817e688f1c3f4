"""Click-log pseudo-labeling, evaluation and simulation toolkit."""

__version__ = "0.1.0"
