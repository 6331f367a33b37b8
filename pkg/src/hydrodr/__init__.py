"""Decision-rule policies for long-term hydrothermal dispatch.

Trains recurrent deep and per-stage linear decision rules against a
deterministic multi-period dispatch LP: forward passes solve the LP per
sampled inflow scenario, backward passes convert volume-target duals into
exact policy gradients.  Ships an interior-point LP solver, an SDDP
baseline for convex lattice instances and a benchmarking CLI.
"""

__version__ = "0.1.0"
