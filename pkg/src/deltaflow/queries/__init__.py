"""Shipped query texts for the built-in algorithms."""
