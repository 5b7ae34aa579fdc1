"""Semi-supervised multi-source domain generalization with multi-task pseudo-labeling,
built on a small numpy autograd engine."""

__version__ = "0.1.0"
