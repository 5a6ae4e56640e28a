"""Deterministic simulator for a decentralized knowledge marketplace.

Researchers are matched to projects by free-energy minimization over
radar-chart skill profiles, projects are funded through a DAO proposal and
escrow state machine, and every action lands on a signed hash-chained ledger.
"""

from .errors import MarketError

__version__ = "0.1.0"

__all__ = ["MarketError", "__version__"]
