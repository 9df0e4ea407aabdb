"""
Test package for the lab.
"""
