"""
Core utilities for the command-line app.

Includes configuration, logging setup and run directory management.
"""
