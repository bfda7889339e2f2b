"""Issue-frame classification with multi-task and adversarial transfer."""

__version__ = "0.1.0"
