"""Training encoders with a probe loss added or reversed, and scoring the trade-off."""

__version__ = "0.1.0"
