"""State estimation for gas pipeline networks with reduced-order Kalman filters."""

__version__ = "0.1.0"
