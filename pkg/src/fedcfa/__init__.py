"""Federated learning simulator with counterfactual factor augmentation."""
__version__ = "0.1.0"
