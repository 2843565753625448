"""Numerical building blocks of vortexlab."""
