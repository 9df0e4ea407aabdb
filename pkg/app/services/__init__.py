"""
Service layer for orchestration.

Coordinates ML services and turns their outputs into run directories,
results tables and the markdown report.
"""
