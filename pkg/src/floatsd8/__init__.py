"""FloatSD8 reduced-precision LSTM training and inference toolkit."""

__version__ = "0.1.0"
