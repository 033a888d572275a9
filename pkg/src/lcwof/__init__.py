"""Generalized and incremental few-shot learning with a three-phase training framework."""

__version__ = "0.1.0"
