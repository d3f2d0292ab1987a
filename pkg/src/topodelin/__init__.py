"""Topology-aware training and evaluation for curvilinear delineation."""

__version__ = "0.1.0"
