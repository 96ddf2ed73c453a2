"""Mid-price forecasting from level-II order books with Siamese shared-weight encoders."""

__version__ = "0.1.0"
