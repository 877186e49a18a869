"""Cluster resource manager for a virtualized batch cluster, with a simulator."""

__version__ = "0.1.0"
