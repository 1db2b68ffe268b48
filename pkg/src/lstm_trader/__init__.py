"""Walk-forward LSTM price prediction with a decile-binned allocation policy."""

__version__ = "0.1.0"
