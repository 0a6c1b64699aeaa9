"""Elastic weight consolidation toolkit for fully-connected classifiers."""

__version__ = "0.1.0"
