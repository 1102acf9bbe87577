"""Audiovisual CPC simulations of the McGurk effect on a synthetic word corpus."""

__version__ = "0.1.0"
