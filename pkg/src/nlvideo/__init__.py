"""Non-local, masked non-local and relation attention blocks for video, in numpy."""

__version__ = "0.1.0"
