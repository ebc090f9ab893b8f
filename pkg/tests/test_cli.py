import json
import subprocess
import sys

import numpy as np
import pytest

from qclfm.cli import main
from qclfm.io import EVT_MAGIC, read_csv, read_depth, read_events, read_field, read_pnm


def _write_cfg(path, **sections):
    """Small two-camera config: ideal detection on a 128 px grid unless overridden."""
    cfg = {
        "seed": 1,
        "detector": {"mode": "two_camera"},
        "scene": {"type": "usaf", "groups": [7], "size_px": 128, "z_offset_um": 0.0},
        "reconstruction": {"width_px": 128, "height_px": 128, "z_um": 0.0, "iterations": 3,
                           "z_min_um": -200.0, "z_max_um": 200.0, "z_step_um": 200.0},
        "simulation": {"duration_s": 0.02, "detection": "ideal"},
    }
    for key, value in sections.items():
        if isinstance(value, dict) and isinstance(cfg.get(key), dict) and key != "scene":
            cfg[key] = {**cfg[key], **value}
        else:
            cfg[key] = value
    path.write_text(json.dumps(cfg))
    return path


def _run(*argv):
    return main([str(a) for a in argv])


def _summary(out):
    return json.loads((out / "summary.json").read_text())


@pytest.fixture
def cfg(tmp_path):
    return _write_cfg(tmp_path / "cfg.json")


def test_simulate_reruns_are_byte_identical(tmp_path):
    c = _write_cfg(tmp_path / "c.json", simulation={"duration_s": 2e-3, "detection": "camera"})
    for name in ("a", "b"):
        assert _run("simulate", "--config", c, "--out", tmp_path / name, "--dump-truth") == 0
    for f in ("events.evt", "events.png", "truth.csv", "summary.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f
    assert _run("simulate", "--config", c, "--out", tmp_path / "c", "--seed", "9") == 0
    assert (tmp_path / "c" / "events.evt").read_bytes() != (tmp_path / "a" / "events.evt").read_bytes()
    header, rows = read_csv(tmp_path / "a" / "truth.csv")
    assert len(rows) == _summary(tmp_path / "a")["pairs"]


def test_zero_duration_gives_empty_event_file(tmp_path, cfg):
    assert _run("simulate", "--config", cfg, "--out", tmp_path / "o", "--duration-s", "0") == 0
    blob = (tmp_path / "o" / "events.evt").read_bytes()
    assert blob == EVT_MAGIC + b"\0\0\0\0"
    assert len(read_events(tmp_path / "o" / "events.evt")) == 0


def test_exit_codes(tmp_path, cfg, monkeypatch, capsys):
    out = tmp_path / "o"
    assert _run("reconstruct", "--config", tmp_path / "missing.json", "--out", out) == 3
    bad = tmp_path / "bad.json"
    bad.write_text('{"reconstruction": {"bogus": 1}}')
    assert _run("reconstruct", "--config", bad, "--out", out) == 2
    assert "reconstruction.bogus" in capsys.readouterr().err
    assert _run("reconstruct", "--config", cfg, "--out", out, "--iterations", "0") == 2
    junk = tmp_path / "junk.evt"
    junk.write_bytes(b"nope")
    assert _run("reconstruct", "--config", cfg, "--out", out, "--events", junk) == 3
    monkeypatch.setenv("QCLFM_THREADS", "x")
    assert _run("reconstruct", "--config", cfg, "--out", out) == 2
    monkeypatch.delenv("QCLFM_THREADS")
    # an empty event file leaves nothing to reconstruct
    empty = tmp_path / "empty.evt"
    empty.write_bytes(EVT_MAGIC + b"\0\0\0\0")
    assert _run("reconstruct", "--config", cfg, "--out", out, "--events", empty) == 4
    none = _write_cfg(tmp_path / "none.json", scene={"type": "none"})
    assert _run("reconstruct", "--config", none, "--out", out) == 2
    assert _run("dof", "--config", none, "--out", out) == 2


def test_reconstruct_products(tmp_path, cfg):
    out = tmp_path / "o"
    assert _run("reconstruct", "--config", cfg, "--out", out, "--pairs-csv") == 0
    for f in ("field.fld", "amplitude.pgm", "shifted.pgm", "error_trace.csv", "pairs.csv", "reconstruct.png"):
        assert (out / f).exists(), f
    field = read_field(out / "field.fld")
    assert field.shape == (128, 128)
    header, trace = read_csv(out / "error_trace.csv")
    assert header == ["iter", "residual"] and len(trace) == 3
    s = _summary(out)
    assert s["iterations"] == 3 and s["config"]["seed"] == 1
    assert read_pnm(out / "amplitude.pgm").shape == (128, 128)


def test_reconstruct_from_event_file(tmp_path):
    c = _write_cfg(tmp_path / "c.json", simulation={"duration_s": 5e-3, "detection": "camera"})
    assert _run("simulate", "--config", c, "--out", tmp_path / "sim") == 0
    out = tmp_path / "rec"
    assert _run("reconstruct", "--config", c, "--out", out, "--events", tmp_path / "sim" / "events.evt") == 0
    s = _summary(out)
    assert s["source"] == "events" and s["coincidences"] > 0


def test_stack_and_depth(tmp_path):
    c = _write_cfg(tmp_path / "c.json", scene={
        "type": "fibers", "size_px": 128,
        "fibers": [{"center_um": [0, -20], "angle_deg": 0, "length_um": 100, "diameter_um": 8, "z_um": -200},
                   {"center_um": [0, 20], "angle_deg": 0, "length_um": 100, "diameter_um": 8, "z_um": 200}]})
    out = tmp_path / "s"
    assert _run("stack", "--config", c, "--out", out) == 0
    index = json.loads((out / "stack" / "index.json").read_text())
    assert list(index) == ["-200", "0", "200"]
    assert read_field(out / "stack" / "slice_000.fld").shape == (128, 128)
    assert (out / "all_in_focus.fld").exists() and (out / "stack.png").exists()
    d = tmp_path / "d"
    assert _run("depth", "--config", c, "--out", d, "--z-step-um", "100") == 0
    depth, pitch, lam = read_depth(d / "depth.dpt")
    assert depth.shape == (128, 128) and pitch == 1.0 and lam == pytest.approx(0.81)
    assert read_pnm(d / "depth.ppm").shape == (128, 128, 3)
    s = _summary(d)
    assert set(s["pixels_per_depth"]) == {"-200", "-100", "0", "100", "200"}
    one = tmp_path / "one"
    assert _run("depth", "--config", c, "--out", one, "--z-min-um", "0", "--z-max-um", "0") == 2


def test_threads_do_not_change_results(tmp_path, cfg, monkeypatch):
    assert _run("stack", "--config", cfg, "--out", tmp_path / "a") == 0
    monkeypatch.setenv("QCLFM_THREADS", "3")
    assert _run("stack", "--config", cfg, "--out", tmp_path / "b") == 0
    for f in ("slice_000.fld", "slice_001.fld", "slice_002.fld"):
        assert (tmp_path / "a" / "stack" / f).read_bytes() == (tmp_path / "b" / "stack" / f).read_bytes()


def test_fit_momentum(tmp_path):
    c = _write_cfg(tmp_path / "c.json", simulation={"duration_s": 0.02, "detection": "camera"},
                   detector={"signal_camera": {"qe": 0.5}})
    out = tmp_path / "m"
    assert _run("fit-momentum", "--config", c, "--out", out) == 0
    s = _summary(out)
    assert s["fits"]["x"]["sigma_per_um"] == pytest.approx(s["expected_sigma_per_um"], rel=0.25)
    assert "accidentals" in s
    header, rows = read_csv(out / "profiles.csv")
    assert header == ["k_per_um", "profile_x", "profile_y"]
    assert (out / "momentum.png").exists()


def test_dof(tmp_path, cfg):
    out = tmp_path / "dof"
    assert _run("dof", "--config", cfg, "--out", out, "--conventional-only") == 0
    header, rows = read_csv(out / "dof_conventional.csv")
    assert rows[:, 1] == pytest.approx([4.556, 5.111], abs=1e-3)
    full = tmp_path / "full"
    assert _run("dof", "--config", cfg, "--out", full, "--duration-s", "0.1") == 0
    s = _summary(full)
    assert s["z_um"] == [-200, 0, 200]
    assert set(s["threshold_sensitivity"]) == {"0.1", "0.2", "0.3"}
    header, rows = read_csv(full / "dof_report.csv")
    assert header == ["z_um", "group", "element", "spacing_um", "contrast", "resolved"]
    assert (full / "dof.png").exists() and (full / "dof_curve.csv").exists()


def test_ghost(tmp_path):
    c = _write_cfg(tmp_path / "c.json", scene={"type": "half_plane", "size_px": 256, "pitch_um": 4.0,
                                                  "z_offset_um": -17500.0})
    out = tmp_path / "g"
    assert _run("ghost", "--config", c, "--out", out) == 0
    img = read_field(out / "ghost.fld")
    assert img.shape == (256, 256)
    header, edges = read_csv(out / "ghost_edges.csv")
    assert len(edges) == 257
    assert _summary(out)["valid_bins"] > 0


@pytest.mark.slow
def test_one_second_two_camera_pair_count(tmp_path):
    c = _write_cfg(tmp_path / "c.json", scene={"type": "none"},
                   simulation={"duration_s": 1.0, "detection": "camera"})
    assert _run("simulate", "--config", c, "--out", tmp_path / "o") == 0
    s = _summary(tmp_path / "o")
    expected = 15e6 * 0.07**2
    sigma = np.sqrt(expected * (1 - 0.07**2))
    assert abs(s["pairs_both_detected"] - expected) < 5 * sigma


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "qclfm", "dof", "--conventional-only", "--out", str(tmp_path)],
                         capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert (tmp_path / "dof_conventional.csv").exists()
    res = subprocess.run([sys.executable, "-m", "qclfm", "--version"], capture_output=True, text=True)
    assert res.returncode == 0
