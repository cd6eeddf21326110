"""Asymmetric self-play for learning driving policies on synthetic highway scenes."""

from asymplay import diffcore as _diffcore  # noqa: F401  (sets float64 default dtype)

__version__ = "0.1.0"
