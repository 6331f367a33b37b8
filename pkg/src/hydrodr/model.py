"""Grid-case data model: buses, branches, generators, hydro cascades.

Cases are immutable after validation (frozen dataclasses with tuple
fields), so they can be shared freely across workers.  The on-disk format
is a single JSON document; see the package README for the schema.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np


class CaseError(Exception):
    pass


class CaseParseError(CaseError):
    """Malformed file or missing/ill-typed schema fields."""


class CaseValidationError(CaseError):
    """A structural invariant is violated; message names entity and rule."""


@dataclass(frozen=True)
class Bus:
    id: int
    demand: tuple[float, ...]        # MW per stage, length T


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    b: float                         # susceptance, flow = b * (theta_to - theta_from)
    g: float                         # conductance, drives the quadratic loss term
    limit: float                     # thermal limit on each directed flow, MW

    @property
    def loss_coef(self) -> float:
        return self.g / (self.g ** 2 + self.b ** 2)


@dataclass(frozen=True)
class Generator:
    id: int
    bus: int
    cost: tuple[float, ...]          # USD/MWh per stage, length T
    pmin: float
    pmax: float
    kind: str                        # "thermal" | "hydro"


@dataclass(frozen=True)
class HydroUnit:
    generator: int                   # id of the hydro-kind Generator
    vmin: float                      # hm3
    vmax: float
    v0: float
    phi: float                       # hm3 of water per MWh produced
    upstream_turbine: tuple[int, ...]  # generator ids of hydros whose outflow arrives here
    upstream_spill: tuple[int, ...]


@dataclass(frozen=True)
class GridCase:
    horizon: int
    stage_hours: float
    reference_bus: int
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]
    hydros: tuple[HydroUnit, ...]

    # -- derived accessors (cheap, computed on demand) ---------------------
    @property
    def n_buses(self) -> int:
        return len(self.buses)

    @property
    def n_hydros(self) -> int:
        return len(self.hydros)

    def bus_index(self) -> dict[int, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    def gen_index(self) -> dict[int, int]:
        return {g.id: i for i, g in enumerate(self.generators)}

    def hydro_index(self) -> dict[int, int]:
        return {h.generator: j for j, h in enumerate(self.hydros)}

    def demand_matrix(self) -> np.ndarray:
        """(T, n_buses) MW."""
        return np.array([b.demand for b in self.buses], dtype=float).T

    def cost_matrix(self) -> np.ndarray:
        """(T, n_generators) USD/MWh."""
        return np.array([g.cost for g in self.generators], dtype=float).T

    def v0(self) -> np.ndarray:
        return np.array([h.v0 for h in self.hydros], dtype=float)

    def vmin(self) -> np.ndarray:
        return np.array([h.vmin for h in self.hydros], dtype=float)

    def vmax(self) -> np.ndarray:
        return np.array([h.vmax for h in self.hydros], dtype=float)

    def max_marginal_cost(self) -> float:
        return max(max(g.cost) for g in self.generators)

    def max_water_value(self) -> float:
        """USD per hm3 of the most valuable possible use of stored water."""
        return self.max_marginal_cost() / min(h.phi for h in self.hydros)


def _expect(obj, key, kind, where):
    if key not in obj:
        raise CaseParseError(f"{where}: missing field {key!r}")
    val = obj[key]
    if kind is float:
        if not isinstance(val, (int, float)) or isinstance(val, bool):
            raise CaseParseError(f"{where}: field {key!r} must be a number")
        return float(val)
    if not isinstance(val, kind):
        raise CaseParseError(f"{where}: field {key!r} must be {kind.__name__}")
    return val


def case_from_dict(doc: dict) -> GridCase:
    horizon = _expect(doc, "horizon", int, "case")
    stage_hours = _expect(doc, "stage_hours", float, "case")
    reference_bus = _expect(doc, "reference_bus", int, "case")
    buses = tuple(
        Bus(id=_expect(b, "id", int, "bus"),
            demand=tuple(float(v) for v in _expect(b, "demand", list, "bus")))
        for b in _expect(doc, "buses", list, "case"))
    branches = tuple(
        Branch(from_bus=_expect(br, "from", int, "branch"),
               to_bus=_expect(br, "to", int, "branch"),
               b=_expect(br, "b", float, "branch"),
               g=_expect(br, "g", float, "branch"),
               limit=_expect(br, "limit", float, "branch"))
        for br in _expect(doc, "branches", list, "case"))
    generators = tuple(
        Generator(id=_expect(g, "id", int, "generator"),
                  bus=_expect(g, "bus", int, "generator"),
                  cost=tuple(float(v) for v in _expect(g, "cost", list, "generator")),
                  pmin=_expect(g, "pmin", float, "generator"),
                  pmax=_expect(g, "pmax", float, "generator"),
                  kind=_expect(g, "kind", str, "generator"))
        for g in _expect(doc, "generators", list, "case"))
    hydros = tuple(
        HydroUnit(generator=_expect(h, "generator", int, "hydro"),
                  vmin=_expect(h, "vmin", float, "hydro"),
                  vmax=_expect(h, "vmax", float, "hydro"),
                  v0=_expect(h, "v0", float, "hydro"),
                  phi=_expect(h, "phi", float, "hydro"),
                  upstream_turbine=tuple(int(u) for u in _expect(h, "upstream_turbine", list, "hydro")),
                  upstream_spill=tuple(int(u) for u in _expect(h, "upstream_spill", list, "hydro")))
        for h in _expect(doc, "hydros", list, "case"))
    case = GridCase(horizon=horizon, stage_hours=stage_hours,
                    reference_bus=reference_bus, buses=buses, branches=branches,
                    generators=generators, hydros=hydros)
    validate_case(case)
    return case


def case_to_dict(case: GridCase) -> dict:
    return {
        "horizon": case.horizon,
        "stage_hours": case.stage_hours,
        "reference_bus": case.reference_bus,
        "buses": [{"id": b.id, "demand": list(b.demand)} for b in case.buses],
        "branches": [{"from": br.from_bus, "to": br.to_bus, "b": br.b,
                      "g": br.g, "limit": br.limit} for br in case.branches],
        "generators": [{"id": g.id, "bus": g.bus, "cost": list(g.cost),
                        "pmin": g.pmin, "pmax": g.pmax, "kind": g.kind}
                       for g in case.generators],
        "hydros": [{"generator": h.generator, "vmin": h.vmin, "vmax": h.vmax,
                    "v0": h.v0, "phi": h.phi,
                    "upstream_turbine": list(h.upstream_turbine),
                    "upstream_spill": list(h.upstream_spill)} for h in case.hydros],
    }


def validate_case(case: GridCase) -> None:
    T = case.horizon
    if T < 2:
        raise CaseValidationError(f"case: horizon must be >= 2, got {T}")
    if case.stage_hours <= 0:
        raise CaseValidationError("case: stage_hours must be positive")

    seen = set()
    for bus in case.buses:
        if bus.id in seen:
            raise CaseValidationError(f"bus {bus.id}: duplicate id")
        seen.add(bus.id)
        if len(bus.demand) != T:
            raise CaseValidationError(f"bus {bus.id}: demand length {len(bus.demand)} != horizon {T}")
        if any(d < 0 for d in bus.demand):
            raise CaseValidationError(f"bus {bus.id}: negative demand entry")
    if case.reference_bus not in seen:
        raise CaseValidationError(f"case: reference_bus {case.reference_bus} does not exist")

    for k, br in enumerate(case.branches):
        if br.from_bus == br.to_bus:
            raise CaseValidationError(f"branch {k}: from_bus equals to_bus ({br.from_bus})")
        if br.from_bus not in seen or br.to_bus not in seen:
            raise CaseValidationError(f"branch {k}: endpoint bus does not exist")
        if br.limit <= 0:
            raise CaseValidationError(f"branch {k}: thermal limit must be positive")
        if br.g ** 2 + br.b ** 2 <= 0:
            raise CaseValidationError(f"branch {k}: g^2 + b^2 must be positive")

    gen_ids = set()
    for g in case.generators:
        if g.id in gen_ids:
            raise CaseValidationError(f"generator {g.id}: duplicate id")
        gen_ids.add(g.id)
        if g.bus not in seen:
            raise CaseValidationError(f"generator {g.id}: bus {g.bus} does not exist")
        if not (0 <= g.pmin <= g.pmax):
            raise CaseValidationError(f"generator {g.id}: requires 0 <= pmin <= pmax")
        if len(g.cost) != T:
            raise CaseValidationError(f"generator {g.id}: cost length != horizon")
        if any(c < 0 for c in g.cost):
            raise CaseValidationError(f"generator {g.id}: negative cost entry")
        if g.kind not in ("thermal", "hydro"):
            raise CaseValidationError(f"generator {g.id}: unknown kind {g.kind!r}")

    kinds = {g.id: g.kind for g in case.generators}
    hydro_ids = set()
    for h in case.hydros:
        if h.generator not in gen_ids:
            raise CaseValidationError(f"hydro {h.generator}: generator does not exist")
        if kinds[h.generator] != "hydro":
            raise CaseValidationError(f"hydro {h.generator}: linked generator is not hydro-kind")
        if h.generator in hydro_ids:
            raise CaseValidationError(f"hydro {h.generator}: duplicate hydro unit")
        hydro_ids.add(h.generator)
        if not (h.vmin <= h.v0 <= h.vmax):
            raise CaseValidationError(f"hydro {h.generator}: requires vmin <= v0 <= vmax")
        if h.phi <= 0:
            raise CaseValidationError(f"hydro {h.generator}: production factor must be positive")
    hydro_gens = {g.id for g in case.generators if g.kind == "hydro"}
    missing = hydro_gens - hydro_ids
    if missing:
        raise CaseValidationError(f"hydro-kind generators without a hydro unit: {sorted(missing)}")
    for h in case.hydros:
        for up in (*h.upstream_turbine, *h.upstream_spill):
            if up not in hydro_ids:
                raise CaseValidationError(f"hydro {h.generator}: upstream id {up} is not a hydro unit")
            if up == h.generator:
                raise CaseValidationError(f"hydro {h.generator}: cascade cycle (self-loop)")
    _check_cascade_dag(case)


def _check_cascade_dag(case: GridCase) -> None:
    """Kahn topological sort over upstream->downstream edges."""
    ids = [h.generator for h in case.hydros]
    downstream: dict[int, set[int]] = {i: set() for i in ids}
    indeg = {i: 0 for i in ids}
    for h in case.hydros:
        ups = set(h.upstream_turbine) | set(h.upstream_spill)
        for up in ups:
            if h.generator not in downstream[up]:
                downstream[up].add(h.generator)
                indeg[h.generator] += 1
    queue = [i for i in ids if indeg[i] == 0]
    visited = 0
    while queue:
        node = queue.pop()
        visited += 1
        for nxt in downstream[node]:
            indeg[nxt] -= 1
            if indeg[nxt] == 0:
                queue.append(nxt)
    if visited != len(ids):
        stuck = sorted(i for i in ids if indeg[i] > 0)
        raise CaseValidationError(f"hydro cascade cycle involving units {stuck}")


def load_case(path) -> GridCase:
    """Load and validate a case file; raises CaseParseError/CaseValidationError."""
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseParseError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise CaseParseError(f"{path}: top-level JSON value must be an object")
    return case_from_dict(doc)


def save_case(case: GridCase, path) -> None:
    Path(path).write_text(json.dumps(case_to_dict(case), indent=2, sort_keys=True) + "\n")


def case_hash(case: GridCase) -> str:
    canon = json.dumps(case_to_dict(case), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def bundled_case_path(name: str = "case3") -> Path:
    return Path(__file__).parent / "data" / f"{name}.json"


def extend_case(case: GridCase, horizon: int) -> GridCase:
    """Cyclically tile per-stage data out to a new horizon.

    Used to evaluate time-invariant policies beyond their training horizon.
    """
    if horizon < 2:
        raise CaseValidationError("extend_case: horizon must be >= 2")

    def tile(seq):
        return tuple(seq[t % len(seq)] for t in range(horizon))

    new = replace(
        case,
        horizon=horizon,
        buses=tuple(replace(b, demand=tile(b.demand)) for b in case.buses),
        generators=tuple(replace(g, cost=tile(g.cost)) for g in case.generators),
    )
    validate_case(new)
    return new


def synthesize_case(n_buses: int, n_hydros: int, seed: int,
                    horizon: int = 12, stage_hours: float = 730.0) -> GridCase:
    """Deterministic feasible case generator: radial grid plus a few loops.

    Thermal capacity alone covers 1.3x peak demand so that the dispatch LP
    has recourse for any hydro behaviour; branch limits are generous.
    """
    if n_buses < 2:
        raise CaseValidationError(f"synthesize_case: n_buses must be >= 2, got {n_buses}")
    if n_hydros < 1:
        raise CaseValidationError(f"synthesize_case: n_hydros must be >= 1, got {n_hydros}")
    n_thermal = max(2, round(1.2 * n_buses) - n_hydros)
    rng = np.random.default_rng(seed)

    n_loads = max(1, round(n_buses * 26 / 28))
    load_buses = sorted(rng.choice(n_buses, size=n_loads, replace=False).tolist())
    buses = []
    for i in range(n_buses):
        if i in load_buses:
            base = float(rng.uniform(20.0, 60.0))
            phase = float(rng.uniform(0.0, 12.0))
            dem = tuple(round(base * (1.0 + 0.2 * math.sin(2 * math.pi * (t + phase) / 12.0)), 4)
                        for t in range(horizon))
        else:
            dem = tuple(0.0 for _ in range(horizon))
        buses.append(Bus(id=i, demand=dem))
    peak_total = max(sum(b.demand[t] for b in buses) for t in range(horizon))

    branches = []
    for i in range(1, n_buses):
        parent = int(rng.integers(0, i))
        branches.append((parent, i))
    n_loops = max(1, n_buses // 9)
    existing = set(branches)
    tries = 0
    while n_loops > 0 and tries < 100:
        tries += 1
        i, j = sorted(rng.integers(0, n_buses, size=2).tolist())
        if i != j and (i, j) not in existing:
            branches.append((i, j))
            existing.add((i, j))
            n_loops -= 1
    branch_objs = tuple(
        Branch(from_bus=i, to_bus=j,
               b=round(-float(rng.uniform(80.0, 320.0)), 4),
               g=round(float(rng.uniform(0.4, 2.0)), 4),
               limit=round(float(rng.uniform(0.8, 1.2)) * peak_total + 50.0, 4))
        for i, j in branches)

    n_gens = n_hydros + n_thermal
    gens = []
    hydro_caps = []
    for gid in range(n_gens):
        bus = int(rng.integers(0, n_buses))
        if gid < n_hydros:
            pmax = round(float(rng.uniform(30.0, 80.0)), 4)
            gens.append(Generator(id=gid, bus=bus, cost=tuple(0.0 for _ in range(horizon)),
                                  pmin=0.0, pmax=pmax, kind="hydro"))
            hydro_caps.append(pmax)
        else:
            cost = round(float(rng.uniform(15.0, 120.0)), 4)
            gens.append(Generator(id=gid, bus=bus, cost=tuple(cost for _ in range(horizon)),
                                  pmin=0.0, pmax=0.0, kind="thermal"))
    # scale thermal capacity to 1.3x peak demand plus loss headroom
    need = 1.3 * peak_total + 0.05 * peak_total
    share = rng.uniform(0.5, 1.5, size=n_thermal)
    share = share / share.sum()
    for k in range(n_thermal):
        g = gens[n_hydros + k]
        gens[n_hydros + k] = replace(g, pmax=round(float(need * share[k]) + 5.0, 4))

    hydros = []
    order = rng.permutation(n_hydros).tolist()
    for pos, j in enumerate(order):
        pmax = hydro_caps[j]
        full_stage_water = 0.004 * pmax * stage_hours    # rough sizing anchor
        vmax = round(float(rng.uniform(1.5, 3.0)) * full_stage_water, 4)
        v0 = round(float(rng.uniform(0.4, 0.7)) * vmax, 4)
        ups_t, ups_s = (), ()
        if pos > 0 and rng.random() < 0.5:
            up = order[pos - 1]
            ups_t, ups_s = (up,), (up,)
        hydros.append(HydroUnit(generator=j, vmin=0.0, vmax=vmax, v0=v0,
                                phi=round(float(rng.uniform(0.002, 0.006)), 6),
                                upstream_turbine=ups_t, upstream_spill=ups_s))
    hydros.sort(key=lambda h: h.generator)

    case = GridCase(horizon=horizon, stage_hours=stage_hours, reference_bus=0,
                    buses=tuple(buses), branches=branch_objs,
                    generators=tuple(gens), hydros=tuple(hydros))
    validate_case(case)
    return case
