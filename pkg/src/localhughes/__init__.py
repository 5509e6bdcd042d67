"""Localized Hughes crowd model: restricted-vision potentials, consensus directions and crowd evolution."""

__version__ = "0.1.0"
