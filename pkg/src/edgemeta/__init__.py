"""Intent-driven edge scheduling with transfer and generative replay."""
__version__ = "0.1.0"
