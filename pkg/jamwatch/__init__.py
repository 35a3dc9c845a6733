"""jamwatch: detect broadband jamming of a 5G channel from IQ spectrograms."""

__version__ = "0.1.0"
