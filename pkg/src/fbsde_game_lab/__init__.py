"""Monte Carlo laboratory for a partially observed FBSDE injection game."""

__version__ = "0.1.0"
