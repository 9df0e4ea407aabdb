"""
Utility helpers used across the app.

Includes artifact path helpers and the SVG preview writer.
"""
