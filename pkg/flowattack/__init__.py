"""Flow-based black-box adversarial attacks on toy classifiers."""

__version__ = "0.1.0"
