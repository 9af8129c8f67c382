"""Smoke test for the `atlas` extension module.

Build and install it first, e.g.::

    maturin develop -m crates/py/Cargo.toml
    python python/smoke_test.py
"""

import math
import os
import tempfile

import atlas

GRID = """timestamp,region,carbon_intensity_gco2_kwh,mix_biomass,mix_hydropower,mix_nuclear,mix_oil,mix_coal,mix_geothermal,mix_natural_gas,mix_solar,mix_wind
1970-01-01T00:00:00Z,IE,300,0,0,0,0,0.1,0,0.5,0,0.4
1970-01-01T00:00:00Z,FR,56,0,0,1,0,0,0,0,0,0
"""


def constant_trace(cpu_w, dram_w, secs):
    lines = ["timestamp_ns,domain,cumulative_uj,max_range_uj"]
    for i in range(secs * 10 + 1):
        t = i * 100_000_000
        lines.append(f"{t},package-0,{cpu_w * 100_000 * i},262143328850")
        lines.append(f"{t},dram-0,{dram_w * 100_000 * i},65712999613")
    return "\n".join(lines) + "\n"


def check_models():
    assert atlas.counter_delta(14, 2, 16) == 4
    ci = atlas.fab_carbon_intensity([(13, 0.783), (594, 0.216), (885, 0.001)])
    assert abs(ci - 139.368) < 5e-4, ci
    cpa = atlas.cpa(
        yield_fraction=0.9,
        fab_carbon_intensity=ci,
        energy_per_area=1.2,
        gas_per_area=200,
        materials_per_area=500,
    )
    assert abs(cpa - 963.60) < 0.01, cpa
    assert abs(atlas.cpu_embodied(2.46, cpa) - 2370.46) < 0.5
    assert math.isclose(atlas.operational_carbon(2.0, 300.0), 600.0)

    factors = atlas.default_water_factors()
    total, by_source = atlas.operational_water(1.0, {"wind": 1.0})
    assert total == factors["wind"] and by_source["wind"] == total

    be = atlas.breakeven(4.74e3, 4.74e-5, 0.1)
    assert 1e8 <= be["queries"] <= 1e9, be
    ssd = atlas.ssd_endurance(480e12, 240e12, 5)
    assert ssd["replacements"] == 9, ssd
    assert atlas.per_unit(8.0, 4) == 2000.0
    s = atlas.sci(1.0, 1000.0, 10.0, 100.0, 2.0)
    assert math.isclose(s["sci_g_per_unit"], (1.0 + 1000.0 * 10.0 / 100.0) / 2.0), s

    server = atlas.HardwareProfile.reference_server()
    assert server.embodied()["total_g"] > 0
    assert abs(server.manufacturing_water()["cpu_l"] - 38.376) <= 0.002 * 38.376

    try:
        atlas.counter_delta(20, 1, 16)
    except ValueError:
        pass
    else:
        raise AssertionError("out-of-range counter accepted")


def check_replay(tmp):
    def write(name, text):
        path = os.path.join(tmp, name)
        with open(path, "w") as f:
            f.write(text)
        return path

    write("q1.sql", "SELECT 1;\n")
    plan = write(
        "plan.json",
        '{"queries":[{"query_id":"q1","sql_path":"q1.sql"}],"repetitions":2,"sampling_interval_ns":100000000}',
    )
    trace = write("trace.csv", constant_trace(10, 2, 10))
    grid = atlas.GridDataset.load(write("grid.csv", GRID))
    assert sorted(grid.regions()) == ["FR", "IE"]
    assert grid.lookup("FR", "2024-01-01T00:00:00Z")["carbon_intensity"] == 56

    report = atlas.replay(plan, trace, grid, "IE", connector="stub:latency_ms=2000")
    report.verify()
    rows = report.per_query
    assert len(rows) == 2 and not report.partial
    assert abs(rows[0]["cpu_energy_j"] - 20.0) < 1e-6, rows[0]
    again = atlas.replay(plan, trace, grid, "IE", connector="stub:latency_ms=2000")
    assert again.to_json() == report.to_json()
    assert atlas.Report.from_json(report.to_json()).to_json() == report.to_json()
    assert report.to_csv().splitlines()[0].startswith("query_id,repetition")
    assert [label for label, _ in report.series("power")] == ["q1"]

    assert report.attach_breakeven()["queries"] > 0
    lifetime = report.attach_lifetime(0.0, 1000.0)
    assert lifetime["operational_carbon_g"] == 0.0
    path = os.path.join(tmp, "report.json")
    report.write(path)
    assert atlas.Report.read(path).to_dict()["analyses"]["lifetime"] is not None


def main():
    check_models()
    with tempfile.TemporaryDirectory() as tmp:
        check_replay(tmp)
    print(f"atlas {atlas.__version__}: smoke test passed")


if __name__ == "__main__":
    main()
