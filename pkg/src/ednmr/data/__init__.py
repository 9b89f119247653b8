"""Bundled donor parameters, drive coefficients, network and experiment defaults."""
