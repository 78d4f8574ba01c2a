"""Graph neural network transfer learning across EEG datasets with heterogeneous montages."""

__version__ = "0.1.0"
