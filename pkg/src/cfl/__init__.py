"""Coin-flipping protocols, game-value martingales and fail-stop attacks."""

__version__ = "0.1.0"
