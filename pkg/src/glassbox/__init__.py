"""Explaining an autoencoder-classifier with attention probing, tree surrogates,
Shapley attributions, decision rules and counterfactuals."""

__version__ = "0.1.0"
