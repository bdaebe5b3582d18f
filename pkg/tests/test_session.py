import json

import numpy as np
import pytest

from modeldisc import models, session as sessions, symreg
from modeldisc.errors import InvalidDecision, MissingDecision, UnknownSession
from modeldisc.session import (DatasetRef, FinalModel, SessionStore, advance,
                               new_session, run_auto, session_from_json,
                               session_to_json, validate_final)

from conftest import tiny_pipeline_config, write_lv_benchmark


@pytest.fixture(scope="module")
def lv_refs(tmp_path_factory, lv_full):
    return write_lv_benchmark(tmp_path_factory.mktemp("lvdata"), lv_full)


@pytest.fixture(scope="module")
def finished(tmp_path_factory, lv_refs):
    """One fully auto-walked tiny session, shared by read-only tests."""
    store = SessionStore(tmp_path_factory.mktemp("store"))
    s = new_session("lotka_volterra_truncated", lv_refs, tiny_pipeline_config())
    store.save(s)
    s = run_auto(s, store)
    return s, store


def test_new_session_validates(lv_refs):
    with pytest.raises(Exception):
        new_session("no_such_model", lv_refs, tiny_pipeline_config())
    bad = [DatasetRef(id="x", csv_path="x.csv", role="train",
                      config={"nope": 1.0})]
    with pytest.raises(Exception):
        new_session("lotka_volterra_truncated", bad, tiny_pipeline_config())
    only_test = [DatasetRef(id="c", csv_path=lv_refs[2].csv_path, role="test",
                            config=lv_refs[2].config)]
    with pytest.raises(Exception):
        new_session("lotka_volterra_truncated", only_test, tiny_pipeline_config())


def test_session_id_deterministic(lv_refs):
    a = new_session("lotka_volterra_truncated", lv_refs, tiny_pipeline_config())
    b = new_session("lotka_volterra_truncated", lv_refs, tiny_pipeline_config())
    c = new_session("lotka_volterra_truncated", lv_refs,
                    tiny_pipeline_config(seed=7))
    assert a.id == b.id
    assert a.id != c.id


def test_first_advance_trains_and_awaits(tmp_path, lv_refs):
    store = SessionStore(tmp_path / "store")
    s = new_session("lotka_volterra_truncated", lv_refs, tiny_pipeline_config())
    store.save(s)
    s = advance(s, store)
    assert s.stage == "AwaitingArchDecision"
    assert len(s.experiments) == 2
    assert s.best_experiment in {r.id for r in s.experiments}
    # the sweep's records survived the round trip to disk
    reloaded = store.load(s.id)
    assert reloaded.stage == "AwaitingArchDecision"
    assert [r.id for r in reloaded.experiments] == [r.id for r in s.experiments]


def test_advance_requires_decision_at_awaiting(tmp_path, lv_refs):
    store = SessionStore(tmp_path / "store")
    s = new_session("lotka_volterra_truncated", lv_refs, tiny_pipeline_config())
    store.save(s)
    s = advance(s, store)
    with pytest.raises(MissingDecision):
        advance(s, store)
    with pytest.raises(InvalidDecision):
        advance(s, store, decision="choose:not-an-experiment")


def test_decision_rejected_at_wrong_stage(tmp_path, lv_refs):
    store = SessionStore(tmp_path / "store")
    s = new_session("lotka_volterra_truncated", lv_refs, tiny_pipeline_config())
    store.save(s)
    with pytest.raises(InvalidDecision):
        advance(s, store, decision="accept")


def test_reject_terminates(tmp_path, lv_refs):
    store = SessionStore(tmp_path / "store")
    s = new_session("lotka_volterra_truncated", lv_refs, tiny_pipeline_config())
    store.save(s)
    s = advance(s, store)
    s = advance(s, store, decision="reject", note="not convinced")
    assert s.stage == "Rejected"
    assert s.decisions[-1].choice == "reject"
    assert s.final_model is None
    with pytest.raises(InvalidDecision):
        advance(s, store, decision="accept")


def test_full_walk_artifacts_and_decision_log(finished):
    s, _store = finished
    assert s.stage == "Finalized"
    assert s.mask_report is not None and s.sensitivity is not None
    assert s.pareto is not None and s.final_model is not None
    # exactly one decision per awaiting stage traversed
    stages = [d.stage for d in s.decisions]
    assert stages == ["AwaitingArchDecision", "AwaitingMaskDecision",
                      "AwaitingInputDecision", "AwaitingExpressionDecision"]
    assert s.final_model.validation is not None
    assert s.final_model.provenance["session"] == s.id


def test_final_model_has_no_network_weights(finished):
    s, _store = finished
    doc = session_to_json(s)["final_model"]
    payload = json.dumps(doc)
    assert "theta" not in payload
    for expr in doc["expressions"].values():
        symreg.parse_expression(expr)  # every correction is a symbolic tree


def test_serialization_round_trip(finished):
    s, store = finished
    doc = session_to_json(s)
    back = session_from_json(doc)
    assert session_to_json(back) == doc
    loaded = store.load(s.id)
    assert session_to_json(loaded) == doc


def test_unknown_session(tmp_path):
    store = SessionStore(tmp_path / "store")
    with pytest.raises(UnknownSession):
        store.load("s-missing")


def test_resume_from_each_persisted_stage(tmp_path, lv_refs, finished):
    """Kill-and-resume: every snapshot continues to the identical final model."""
    reference, _ = finished
    ref_final = session_to_json(reference)["final_model"]

    store = SessionStore(tmp_path / "walk")
    s = new_session("lotka_volterra_truncated", lv_refs, tiny_pipeline_config())
    store.save(s)
    snapshots = [store.path(s.id).read_text()]
    while s.stage not in sessions.TERMINAL_STAGES:
        decision = "accept" if s.stage in sessions.AWAITING_STAGES else None
        s = advance(s, store, decision=decision)
        snapshots.append(store.path(s.id).read_text())

    for i, snap in enumerate(snapshots[:-1]):
        resume_store = SessionStore(tmp_path / f"resume{i}")
        resumed = session_from_json(json.loads(snap))
        resume_store.save(resumed)
        resumed = run_auto(resumed, resume_store)
        final = session_to_json(resumed)["final_model"]
        assert final == ref_final


def test_validate_final_zero_expressions(catalog, lv_refs, lv_full):
    # zero-constant corrections leave the base model untouched: improvement 0
    from modeldisc.training import load_dataset_csv
    model = catalog.get("lotka_volterra_truncated")
    test_ref = lv_refs[2]
    ds = load_dataset_csv(test_ref.csv_path, model,
                          model.params_from(test_ref.config), "c", role="test")
    final = FinalModel(base_model=model.name,
                       expressions={"x": "0.0", "y": "0.0"}, provenance={})
    result = validate_final(final, ds, model)
    assert result["loss_final"] == result["loss_base"]
    assert result["rel_improvement"] == 0.0


def test_validate_final_requires_test_role(catalog, lv_refs):
    from modeldisc.training import load_dataset_csv
    model = catalog.get("lotka_volterra_truncated")
    train_ref = lv_refs[0]
    ds = load_dataset_csv(train_ref.csv_path, model,
                          model.params_from(train_ref.config), "a", role="train")
    final = FinalModel(base_model=model.name, expressions={}, provenance={})
    with pytest.raises(Exception):
        validate_final(final, ds, model)


def test_simulate_final_applies_expressions(catalog):
    # planting the true interaction terms turns the truncated model into the
    # full one
    trunc = catalog.get("lotka_volterra_truncated")
    full = catalog.get("lotka_volterra_full")
    p = full.default_params()
    times = np.linspace(0.0, 2.0, 11)
    final = FinalModel(
        base_model=trunc.name,
        expressions={"x": "(* -0.9 (* var:x var:y))",
                     "y": "(* 1.8 (* var:x var:y))"},
        provenance={})
    got = sessions.simulate_final(final, trunc, p, times, dt=0.05)
    want = models.simulate(full, p, (0.0, 2.0), 0.05, times)
    assert np.allclose(got.states, want.states, atol=1e-12)


def test_expression_choice_applied(tmp_path, lv_refs):
    store = SessionStore(tmp_path / "store")
    s = new_session("lotka_volterra_truncated", lv_refs, tiny_pipeline_config())
    store.save(s)
    while s.stage != "AwaitingExpressionDecision":
        decision = "accept" if s.stage in sessions.AWAITING_STAGES else None
        s = advance(s, store, decision=decision)
    choice = f"0=0,1={len(s.pareto[1].entries) - 1}"
    s = advance(s, store, decision=f"choose:{choice}")
    assert s.stage == "Finalized"
    exprs = list(s.final_model.expressions.values())
    assert exprs[0] == str(s.pareto[0].entries[0].tree)
    assert exprs[1] == str(s.pareto[1].entries[-1].tree)
