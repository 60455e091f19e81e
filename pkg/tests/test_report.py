import json

from leasesim import engine, report
from leasesim.geometry import build_model


def _records(name, seed, **kw):
    return [json.loads(line) for line in engine.run(name, seed=seed, **kw).trace]


def test_gantt_bars_respect_non_overlap():
    recs = _records("experiment1", 42)
    bars = report.lease_bars(recs)
    assert {b["holder"] for b in bars} == {"A", "B"}
    by_block = {}
    for b in bars:
        by_block.setdefault(b["block"], []).append(b)
    for blk in by_block.values():
        blk.sort(key=lambda b: b["t_start"])
        for x, y in zip(blk, blk[1:]):
            assert x["shown_end"] <= y["t_start"] + 1e-9


def test_proxy_bars_present_in_experiment3():
    bars = report.lease_bars(_records("experiment3", 42))
    assert any(b["kind"] != "V2V" for b in bars)


def test_trajectories_cover_every_vehicle():
    recs = _records("experiment2", 42)
    traj = report.trajectories(recs)
    assert set(traj) == {"A", "B"}
    for tr in traj.values():
        assert tr["t"] == sorted(tr["t"])
        assert tr["phase"][-1] == "PostCrossing"


def test_render_is_deterministic(tmp_path):
    recs = _records("experiment1", 42)
    a = report.render_report(recs, tmp_path / "a", "x")
    b = report.render_report(recs, tmp_path / "b", "x")
    for k in a:
        assert open(a[k], "rb").read() == open(b[k], "rb").read()


def test_summary_lists_collisions():
    recs = _records("experiment3", 1, no_v2v=["A"])
    text = report.summary_text(recs)
    assert "collisions: 0" not in text and " x " in text


def test_empty_records_render(tmp_path):
    paths = report.render_report([], tmp_path)
    assert "collisions: 0" in open(paths["summary"]).read()


def test_audit_agrees_with_report():
    r = engine.run("experiment2", seed=42)
    assert engine.audit_lease_log(r.store_log, build_model(engine.load_scenario("experiment2").geometry)) == []
