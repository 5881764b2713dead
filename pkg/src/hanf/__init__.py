"""Joint hyperparameter and neural architecture search over simulated federated clients."""

__version__ = "0.1.0"
