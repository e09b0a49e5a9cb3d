"""Loop measures, loop soups and their Gaussian and Bose-gas counterparts on finite graphs."""

__version__ = "0.1.0"
