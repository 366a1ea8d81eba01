"""Neural energy descent: least-squares parameter flows for regression and steady PDEs."""

__version__ = "0.1.0"
