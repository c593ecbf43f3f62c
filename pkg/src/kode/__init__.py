"""Deep Koopman modelling of a six-wheel independently driven and steered vehicle."""

__version__ = "0.1.0"
