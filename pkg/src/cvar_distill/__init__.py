"""CVaR teacher / neural student portfolio allocation toolkit."""

__version__ = "0.1.0"
