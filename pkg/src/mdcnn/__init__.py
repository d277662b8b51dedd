"""Multiple-description image coding with convolutional networks around a JPEG codec."""

__version__ = "0.1.0"
