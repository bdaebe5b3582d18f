import csv
import json
import re
from pathlib import Path

import pytest

from modeldisc.cli import main


def run(args, store=None):
    argv = (["--store", str(store)] if store else []) + args
    return main(argv)


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


@pytest.fixture()
def lv_csvs(tmp_path):
    paths = {}
    for name, cfg in [("a", "x0=0.44249,y0=4.628"), ("b", "x0=0.6,y0=3.8"),
                      ("c", "x0=0.5,y0=4.2")]:
        out = tmp_path / f"lv_{name}.csv"
        code = run(["generate", "--model", "lotka_volterra_full",
                    "--config", cfg, "--out", str(out),
                    "--samples", "21", "--t-end", "2.0"])
        assert code == 0
        paths[name] = (out, cfg)
    return paths


TINY = ["--sweep", "4;8", "--pretrain-iters", "300", "--train-iters", "40",
        "--train-patience", "40", "--symreg-population", "150",
        "--symreg-generations", "25"]


def new_tiny_session(tmp_path, lv_csvs, store, seed=42, capsys=None):
    a, b, c = lv_csvs["a"], lv_csvs["b"], lv_csvs["c"]
    code = run(["session", "new", "--model", "lotka_volterra_truncated",
                "--train", f"{a[0]}:{a[1]}", f"{b[0]}:{b[1]}",
                "--test", f"{c[0]}:{c[1]}", "--seed", str(seed)] + TINY,
               store=store)
    assert code == 0
    sids = [p.stem for p in Path(store).glob("*.json")]
    assert len(sids) >= 1
    return sids[-1]


def test_generate_csv_shape(tmp_path):
    out = tmp_path / "tz.csv"
    code = run(["generate", "--model", "two_zone_box_full", "--out", str(out),
                "--samples", "11", "--t-end", "30"])
    assert code == 0
    rows = read_csv(out)
    assert rows[0] == ["t", "T1", "T2"]
    assert len(rows) == 12
    assert float(rows[1][1]) == -20.0  # initial zone-1 temperature


def test_generate_unknown_model_errors(tmp_path, capsys):
    code = run(["generate", "--model", "nope", "--out", str(tmp_path / "x.csv")])
    assert code == 1
    assert "no model named" in capsys.readouterr().err


def test_usage_error_exit_code():
    assert main(["session"]) == 1
    assert main(["export", "nothing", "sid", "--out", "x"]) == 1


def test_advance_without_decision_names_stage(tmp_path, lv_csvs, capsys):
    store = tmp_path / "store"
    sid = new_tiny_session(tmp_path, lv_csvs, store)
    assert run(["session", "advance", sid, "--jobs", "1"], store=store) == 0
    code = run(["session", "advance", sid, "--jobs", "1"], store=store)
    assert code == 1
    assert "AwaitingArchDecision" in capsys.readouterr().err


def test_export_before_ready_exits_one(tmp_path, lv_csvs, capsys):
    store = tmp_path / "store"
    sid = new_tiny_session(tmp_path, lv_csvs, store)
    code = run(["export", "heatmap", sid, "--out", str(tmp_path / "h.csv")],
               store=store)
    assert code == 1


def test_auto_walk_finalizes_and_exports(tmp_path, lv_csvs, capsys):
    store = tmp_path / "store"
    sid = new_tiny_session(tmp_path, lv_csvs, store)
    code = run(["session", "advance", sid, "--auto", "--jobs", "1"], store=store)
    assert code == 0
    out = capsys.readouterr().out
    assert "Finalized" in out

    shown = run(["session", "show", sid, "--json"], store=store)
    assert shown == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["stage"] == "Finalized"
    assert doc["final_model"]["validation"]["rel_improvement"] > 0

    for artifact, suffix in [("heatmap", ".csv"), ("pareto", ".json"),
                             ("sweep", ".csv")]:
        out_path = tmp_path / f"{artifact}{suffix}"
        assert run(["export", artifact, sid, "--out", str(out_path)],
                   store=store) == 0
        assert out_path.exists()
        assert out_path.with_suffix(".png").exists()  # figure rendered alongside


def test_auto_equals_stepped_accepts(tmp_path, lv_csvs, capsys):
    store_auto = tmp_path / "s_auto"
    store_step = tmp_path / "s_step"
    sid_a = new_tiny_session(tmp_path, lv_csvs, store_auto)
    sid_b = new_tiny_session(tmp_path, lv_csvs, store_step)
    assert sid_a == sid_b  # same inputs, same deterministic id

    assert run(["session", "advance", sid_a, "--auto", "--jobs", "1"],
               store=store_auto) == 0
    # stepped: advance, then accept at each decision point
    assert run(["session", "advance", sid_b, "--jobs", "1"], store=store_step) == 0
    for _ in range(8):
        doc = json.loads(Path(store_step, f"{sid_b}.json").read_text())
        if doc["stage"] in ("Finalized", "Rejected"):
            break
        assert run(["session", "advance", sid_b, "--decision", "accept",
                    "--jobs", "1"], store=store_step) == 0
    capsys.readouterr()

    scrub = lambda text: re.sub(r'"(timestamp|wall_time)": [0-9eE+.-]+', '"t": 0', text)
    a = scrub(Path(store_auto, f"{sid_a}.json").read_text())
    b = scrub(Path(store_step, f"{sid_b}.json").read_text())
    assert a == b


def test_show_human_readable(tmp_path, lv_csvs, capsys):
    store = tmp_path / "store"
    sid = new_tiny_session(tmp_path, lv_csvs, store)
    assert run(["session", "show", sid], store=store) == 0
    out = capsys.readouterr().out
    assert sid in out and "Created" in out


def test_store_env_var(tmp_path, lv_csvs, monkeypatch, capsys):
    monkeypatch.setenv("MODELDISC_STORE", str(tmp_path / "envstore"))
    sid = None
    a, _ = lv_csvs["a"]
    code = main(["session", "new", "--model", "lotka_volterra_truncated",
                 "--train", f"{a}:x0=0.44249,y0=4.628"] + TINY)
    assert code == 0
    sid = capsys.readouterr().out.strip()
    assert (tmp_path / "envstore" / f"{sid}.json").exists()
