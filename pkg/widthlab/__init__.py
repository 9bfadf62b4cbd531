"""widthlab - Finite-width training versus infinite-width limits of MLPs."""

__version__ = "0.1.0"
