"""Reference-guided volumetric super-resolution toolkit for cardiac DWI."""

__version__ = "0.1.0"
