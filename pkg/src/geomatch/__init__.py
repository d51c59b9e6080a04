"""Geodesic matching of piecewise-Lipschitz images."""
