"""Two mechanical modes coupled through a two-tone pumped optical cavity."""

__version__ = "0.1.0"
