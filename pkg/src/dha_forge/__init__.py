"""Driver hazardous action classification from synthetic two-vehicle crash narratives."""

__version__ = "0.1.0"
