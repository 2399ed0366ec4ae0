"""Next-best-view planning lab: simulator, VIN fitness predictor and baselines."""

__version__ = "0.1.0"
