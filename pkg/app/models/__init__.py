"""
Pydantic models for run configuration and result rows.
"""
