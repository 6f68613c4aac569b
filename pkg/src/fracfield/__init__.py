"""Gaussian random fields from fractional elliptic SPDEs via finite elements and sinc quadrature."""

__version__ = "0.1.0"
