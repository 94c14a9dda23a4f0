"""coyotekit: automated concolic unit testing for MiniC."""

__version__ = "0.1.0"
