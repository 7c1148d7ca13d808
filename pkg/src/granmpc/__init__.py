"""Robust + stochastic MPC with prediction models of different granularity.

The package provides convex-set arithmetic (zonotopes, H-polytopes, invariant
sets), tube-based constraint tightening, chance-constraint deterministization,
a dense SQP/QP trajectory optimizer, and a closed-loop Monte Carlo benchmark
for a mobile-robot collision-avoidance scenario.
"""

__version__ = "0.1.0"
