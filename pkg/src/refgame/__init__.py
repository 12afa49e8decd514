"""Referential-game emergent communication: agents, estimators, analysis."""

__version__ = "0.1.0"
