"""Homogenisation toolkit for Stokes flow in evolving periodic porous media."""
