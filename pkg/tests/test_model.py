"""Case model: loading, validation, synthesis, round trips."""

import json

import pytest

from hydrodr.model import (CaseParseError, CaseValidationError, bundled_case_path,
                           case_from_dict, case_hash, case_to_dict, extend_case,
                           load_case, save_case, synthesize_case)


def test_bundled_case3_shape():
    case = load_case(bundled_case_path())
    assert case.n_buses == 3
    assert len(case.branches) == 3          # the three buses form a loop
    assert len(case.generators) == 3
    assert case.n_hydros == 1
    assert case.horizon == 48
    assert case.stage_hours == 730.0
    ends = {frozenset((br.from_bus, br.to_bus)) for br in case.branches}
    assert len(ends) == 3
    # hydro at bus 1, cheap thermal at bus 2, costliest unit plus the only
    # demand at bus 3
    kinds = {g.bus: g.kind for g in case.generators}
    assert kinds == {1: "hydro", 2: "thermal", 3: "thermal"}
    costly = max(case.generators, key=lambda g: max(g.cost))
    assert costly.bus == 3
    assert [max(b.demand) > 0 for b in case.buses] == [False, False, True]


def test_load_rejects_malformed_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(CaseParseError):
        load_case(p)
    p.write_text('[1, 2]')
    with pytest.raises(CaseParseError):
        load_case(p)


def test_validation_v0_out_of_reservoir_bounds():
    doc = case_to_dict(load_case(bundled_case_path()))
    doc["hydros"][0]["v0"] = doc["hydros"][0]["vmax"] + 1.0
    with pytest.raises(CaseValidationError, match="vmin <= v0 <= vmax"):
        case_from_dict(doc)


def test_validation_cascade_cycle():
    doc = case_to_dict(load_case(bundled_case_path()))
    g = dict(doc["generators"][1])
    g.update({"id": 9, "kind": "hydro", "cost": [0.0] * doc["horizon"]})
    doc["generators"].append(g)
    doc["hydros"][0]["upstream_turbine"] = [9]
    doc["hydros"].append({"generator": 9, "vmin": 0.0, "vmax": 10.0, "v0": 5.0,
                          "phi": 1.0, "upstream_turbine": [1], "upstream_spill": []})
    with pytest.raises(CaseValidationError, match="cycle"):
        case_from_dict(doc)


@pytest.mark.parametrize("mutate,message", [
    (lambda d: d["buses"][0].__setitem__("demand", [-1.0] * 48), "negative demand"),
    (lambda d: d["branches"][0].__setitem__("limit", 0.0), "limit"),
    (lambda d: d["branches"][0].update({"to": d["branches"][0]["from"]}), "from_bus"),
    (lambda d: d["generators"][0].__setitem__("pmin", -1.0), "pmin"),
    (lambda d: d["generators"][0].__setitem__("kind", "wind"), "kind"),
    (lambda d: d["hydros"][0].__setitem__("phi", 0.0), "production factor"),
    (lambda d: d.__setitem__("reference_bus", 99), "reference_bus"),
    (lambda d: d.__setitem__("horizon", 1), "horizon"),
])
def test_validation_errors_name_the_invariant(mutate, message):
    doc = case_to_dict(load_case(bundled_case_path()))
    if "horizon" in message:
        doc["horizon"] = 1
        doc = json.loads(json.dumps(doc))
        for b in doc["buses"]:
            b["demand"] = b["demand"][:1]
        for g in doc["generators"]:
            g["cost"] = g["cost"][:1]
    else:
        mutate(doc)
    with pytest.raises(CaseValidationError, match=message):
        case_from_dict(doc)


def test_duplicate_bus_id_rejected():
    doc = case_to_dict(load_case(bundled_case_path()))
    doc["buses"][1]["id"] = doc["buses"][0]["id"]
    with pytest.raises(CaseValidationError, match="duplicate"):
        case_from_dict(doc)


def test_roundtrip_structural_equality(tmp_path):
    case = synthesize_case(9, 3, seed=4)
    p = tmp_path / "case.json"
    save_case(case, p)
    assert load_case(p) == case


def test_synthesize_bolivia_class_dimensions():
    case = synthesize_case(28, 11, seed=1)
    assert case.n_buses == 28
    assert case.n_hydros == 11
    assert len(case.generators) == 34
    n_loads = sum(1 for b in case.buses if max(b.demand) > 0)
    assert n_loads == 26
    # thermal capacity alone covers 1.3x peak demand
    peak = max(case.demand_matrix().sum(axis=1))
    thermal = sum(g.pmax for g in case.generators if g.kind == "thermal")
    assert thermal >= 1.3 * peak


def test_synthesize_minimum_and_errors():
    case = synthesize_case(2, 1, seed=99)
    assert case.n_buses == 2
    assert len(case.branches) >= 1
    with pytest.raises(CaseValidationError):
        synthesize_case(1, 1, seed=0)
    with pytest.raises(CaseValidationError):
        synthesize_case(5, 0, seed=0)


def test_synthesize_deterministic_bytes(tmp_path):
    p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
    save_case(synthesize_case(12, 4, seed=7), p1)
    save_case(synthesize_case(12, 4, seed=7), p2)
    assert p1.read_bytes() == p2.read_bytes()
    save_case(synthesize_case(12, 4, seed=8), p2)
    assert p1.read_bytes() != p2.read_bytes()


def test_cascade_topological_order_exists():
    case = synthesize_case(20, 8, seed=3)
    # Kahn order covers all hydros (validate_case would have raised otherwise)
    ids = {h.generator for h in case.hydros}
    for h in case.hydros:
        assert set(h.upstream_turbine) <= ids


def test_case_hash_stable_and_sensitive():
    c1 = synthesize_case(6, 2, seed=0)
    c2 = synthesize_case(6, 2, seed=0)
    c3 = synthesize_case(6, 2, seed=1)
    assert case_hash(c1) == case_hash(c2)
    assert case_hash(c1) != case_hash(c3)


def test_extend_case_tiles_per_stage_data():
    case = load_case(bundled_case_path())
    ext = extend_case(case, 96)
    assert ext.horizon == 96
    assert ext.buses[2].demand[:48] == case.buses[2].demand
    assert ext.buses[2].demand[48:] == case.buses[2].demand
    assert ext.generators[1].cost[50] == case.generators[1].cost[2]


def test_max_water_value():
    case = load_case(bundled_case_path())
    assert case.max_marginal_cost() == 100.0
    assert case.max_water_value() == pytest.approx(100.0 / 0.00432)
