"""Non-iterative deep autoencoder with exact distributed and federated training."""

__version__ = "0.1.0"
