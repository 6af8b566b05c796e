"""Multi-task RGB-D scene understanding on a framework-free numpy autodiff engine."""

__version__ = "0.1.0"
