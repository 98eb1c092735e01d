"""Counterfactual interactive recommendation that plans around filter bubbles."""

__version__ = "0.1.0"
