"""Mind-wandering detection from EEG with a from-scratch convolutional network."""

__version__ = "0.1.0"
