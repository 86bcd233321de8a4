"""blendnet: heterogeneous multi-agent ODE networks and their blended dynamics.

The package assembles coupled networks of ordinary differential equations
under diffusive, output, rank-deficient, and funnel couplings, reduces
them to their blended (averaged) dynamics, and ships a set of
distributed-computation recipes (counting, roster, least squares, median,
dispatch, oscillator synchronization, state estimation) together with
independent centralized oracles and a scenario-driven CLI.
"""

from __future__ import annotations

__version__ = "0.1.0"
