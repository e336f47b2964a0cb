"""Dual-branch multiple-instance detection with a normal-region class,
top-k region selection and a weak/semi/full supervision objective."""

__version__ = "0.1.0"
