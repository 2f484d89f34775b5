"""Cross-silo federated learning with loss-reduction adjusted re-weighting."""

__version__ = "0.1.0"
