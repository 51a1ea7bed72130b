"""Day-ahead joint scenario generation for wind and solar fleets."""

__version__ = "0.1.0"
