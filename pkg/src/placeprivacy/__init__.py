"""Simulation of semantic location privacy attacks on obfuscated check-in data."""

__version__ = "0.1.0"
