"""Shared fixtures: small deterministic cases used across the suite."""

import numpy as np
import pytest

from hydrodr.model import Branch, Bus, Generator, GridCase, HydroUnit


def build_tiny_case(horizon: int = 4, demand: float = 5.0, v0: float = 5.0,
                    inflow_capacity: float = 10.0, hydro_pmax: float = 4.0,
                    thermal_cost: float = 10.0, vmin: float = 0.0) -> GridCase:
    """Two buses, one line, one hydro + one thermal; stage_hours=1 so water
    and energy numbers stay O(1) and finite differences are clean."""
    T = horizon
    return GridCase(
        horizon=T, stage_hours=1.0, reference_bus=0,
        buses=(Bus(0, tuple(0.0 for _ in range(T))),
               Bus(1, tuple(float(demand) for _ in range(T)))),
        branches=(Branch(0, 1, b=-50.0, g=0.5, limit=max(4.0 * demand, 10.0)),),
        generators=(Generator(0, 0, tuple(0.0 for _ in range(T)), 0.0, hydro_pmax, "hydro"),
                    Generator(1, 1, tuple(float(thermal_cost) for _ in range(T)),
                              0.0, 3.0 * demand + 1.0, "thermal")),
        hydros=(HydroUnit(0, vmin=float(vmin), vmax=float(inflow_capacity), v0=float(v0),
                          phi=1.0, upstream_turbine=(), upstream_spill=()),),
    )


def build_cascade_case(horizon: int = 12) -> GridCase:
    """Three buses with a loop, two cascading hydros, two thermals.

    This is the comparison-scale instance: convex, stochastic-ready, small
    enough to train policies and run SDDP inside the acceptance budget.
    """
    T = horizon
    return GridCase(
        horizon=T, stage_hours=1.0, reference_bus=0,
        buses=(Bus(0, tuple(0.0 for _ in range(T))),
               Bus(1, tuple(float(5.0 + np.sin(2 * np.pi * t / 12.0)) for t in range(T))),
               Bus(2, tuple(float(3.0 + 0.5 * np.cos(2 * np.pi * t / 12.0)) for t in range(T)))),
        branches=(Branch(0, 1, b=-50.0, g=0.5, limit=25.0),
                  Branch(1, 2, b=-40.0, g=0.4, limit=20.0),
                  Branch(0, 2, b=-60.0, g=0.6, limit=25.0)),
        generators=(Generator(0, 0, tuple(0.0 for _ in range(T)), 0.0, 4.0, "hydro"),
                    Generator(1, 1, tuple(0.0 for _ in range(T)), 0.0, 4.0, "hydro"),
                    Generator(2, 1, tuple(10.0 for _ in range(T)), 0.0, 15.0, "thermal"),
                    Generator(3, 2, tuple(30.0 for _ in range(T)), 0.0, 15.0, "thermal")),
        hydros=(HydroUnit(0, vmin=0.0, vmax=10.0, v0=5.0, phi=1.0,
                          upstream_turbine=(), upstream_spill=()),
                HydroUnit(1, vmin=0.0, vmax=8.0, v0=4.0, phi=1.2,
                          upstream_turbine=(0,), upstream_spill=(0,))),
    )


@pytest.fixture
def tiny_case() -> GridCase:
    return build_tiny_case()


@pytest.fixture
def cascade_case() -> GridCase:
    return build_cascade_case()
