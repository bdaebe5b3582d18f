"""Resumable discovery sessions: state machine, persistence, final models.

A session walks Created -> Trained -> AwaitingArchDecision -> Masked ->
AwaitingMaskDecision -> Analyzed -> AwaitingInputDecision -> Regressed ->
AwaitingExpressionDecision -> Finalized, pausing at every Awaiting* stage for
an engineer decision (accept the default, choose an alternative, or reject,
which terminates the session).  Artifacts are persisted before the stage
field moves past them, so a killed process resumes to an identical pipeline.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import nn, pipeline, reduction, symreg, training, ude
from .errors import InvalidDecision, InvalidModel, MissingDecision, UnknownSession
from .models import DynamicalModel, ModelCatalog, Trajectory, builtin_catalog, rk4_integrate
from .symreg import evaluate_expression, parse_expression

STAGES = ("Created", "Trained", "AwaitingArchDecision", "Masked",
          "AwaitingMaskDecision", "Analyzed", "AwaitingInputDecision",
          "Regressed", "AwaitingExpressionDecision", "Finalized", "Rejected")
AWAITING_STAGES = ("AwaitingArchDecision", "AwaitingMaskDecision",
                   "AwaitingInputDecision", "AwaitingExpressionDecision")
TERMINAL_STAGES = ("Finalized", "Rejected")

# intermediate stage reached when an Awaiting decision's computation is done
_NEXT_AWAITING = {
    "Created": ("Trained", "AwaitingArchDecision"),
    "AwaitingArchDecision": ("Masked", "AwaitingMaskDecision"),
    "AwaitingMaskDecision": ("Analyzed", "AwaitingInputDecision"),
    "AwaitingInputDecision": ("Regressed", "AwaitingExpressionDecision"),
}
_RESUME_BUMP = {"Trained": "AwaitingArchDecision", "Masked": "AwaitingMaskDecision",
                "Analyzed": "AwaitingInputDecision",
                "Regressed": "AwaitingExpressionDecision"}


@dataclass
class Decision:
    stage: str
    choice: str          # "accept" | "choose:<x>" | "reject"
    timestamp: float
    note: str = ""


@dataclass
class DatasetRef:
    id: str
    csv_path: str
    role: str
    config: dict[str, float]


@dataclass
class FinalModel:
    """The accepted outcome: base physics plus symbolic corrections, no network."""

    base_model: str
    expressions: dict[str, str]     # equation (state) name -> prefix expression
    provenance: dict
    validation: Optional[dict] = None


@dataclass
class Session:
    id: str
    model_name: str
    stage: str
    datasets: list[DatasetRef]
    pipeline: pipeline.PipelineConfig
    experiments: list[training.ExperimentRecord] = field(default_factory=list)
    best_experiment: Optional[str] = None
    chosen_experiment: Optional[str] = None
    mask_report: Optional[reduction.MaskReport] = None
    chosen_k: Optional[int] = None
    sensitivity: Optional[reduction.SensitivityReport] = None
    selected_inputs: Optional[list[str]] = None
    selected_params: Optional[list[str]] = None
    pareto: Optional[list[symreg.ParetoFront]] = None
    pareto_targets: Optional[list[str]] = None
    chosen_expressions: Optional[dict[str, int]] = None
    final_model: Optional[FinalModel] = None
    decisions: list[Decision] = field(default_factory=list)

    def decision_hash(self) -> str:
        payload = json.dumps([[d.stage, d.choice, d.note] for d in self.decisions])
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def make_session_id(model_name: str, datasets: Sequence[DatasetRef], seed: int) -> str:
    parts = [model_name, f"seed={seed}"]
    for ref in datasets:
        cfg = ",".join(f"{k}={ref.config[k]!r}" for k in sorted(ref.config))
        parts.append(f"{ref.id}:{ref.role}:{cfg}")
    return "s-" + hashlib.sha1("|".join(parts).encode()).hexdigest()[:12]


def new_session(model_name: str, datasets: Sequence[DatasetRef],
                pcfg: pipeline.PipelineConfig,
                catalog: Optional[ModelCatalog] = None) -> Session:
    catalog = catalog or builtin_catalog()
    model = catalog.get(model_name)
    for ref in datasets:
        model.params_from(ref.config)  # validates the names
    if not any(ref.role == "train" for ref in datasets):
        raise InvalidModel("a session needs at least one training dataset")
    sid = make_session_id(model_name, datasets, pcfg.seed)
    return Session(id=sid, model_name=model_name, stage="Created",
                   datasets=list(datasets), pipeline=pcfg)


def load_session_datasets(session: Session, catalog: Optional[ModelCatalog] = None
                          ) -> list[training.TimeSeriesDataset]:
    catalog = catalog or builtin_catalog()
    model = catalog.get(session.model_name)
    out = []
    for ref in session.datasets:
        config = model.params_from(ref.config)
        out.append(training.load_dataset_csv(ref.csv_path, model, config,
                                             dataset_id=ref.id, role=ref.role))
    return out


# ---------------------------------------------------------------------------
# Final model construction and validation.

def build_final_model(session: Session, model: DynamicalModel) -> FinalModel:
    report = session.mask_report
    k = session.chosen_k
    equations = reduction.significance_ordering(report.ratios)[:k]
    fronts = session.pareto
    expressions: dict[str, str] = {}
    for pos, eq in enumerate(np.sort(np.asarray(equations, dtype=int))):
        front = fronts[pos]
        if session.chosen_expressions is not None and str(pos) in session.chosen_expressions:
            entry = front.entries[session.chosen_expressions[str(pos)]]
        else:
            entry = symreg.select_expression(front, strategy="knee")
        expressions[model.state_names[int(eq)]] = str(entry.tree)
    return FinalModel(base_model=model.name, expressions=expressions,
                      provenance={"session": session.id,
                                  "decision_hash": session.decision_hash()})


def simulate_final(final: FinalModel, model: DynamicalModel, p: np.ndarray,
                   save_times: Sequence[float], dt: Optional[float] = None,
                   substeps: int = 1) -> Trajectory:
    """Integrate the base model with the accepted symbolic corrections added."""
    save = np.asarray(save_times, dtype=float)
    if dt is None:
        dt = ude.grid_dt(save) / max(1, substeps)
    p = np.asarray(p, dtype=float)
    eq_index = {name: i for i, name in enumerate(model.state_names)}
    corrections = [(eq_index[name], parse_expression(text))
                   for name, text in final.expressions.items()]
    param_row = dict(zip(model.param_names, p))

    def deriv(u, x, t):
        du = np.asarray(model.rhs(u, x, p, t), dtype=float).copy()
        row = dict(zip(model.state_names, u))
        row.update(param_row)
        for eq, tree in corrections:
            du[eq] += evaluate_expression(tree, row)
        return du

    return rk4_integrate(model, deriv, p, (save[0], save[-1]), dt, save)


def validate_final(final: FinalModel, test_dataset, model: DynamicalModel,
                   substeps: int = 1) -> dict:
    """Test-set loss of base vs final model and the relative improvement."""
    if test_dataset.role != "test":
        raise InvalidModel("validation requires the held-out test dataset")
    dt = ude.grid_dt(test_dataset.times) / max(1, substeps)
    sigma = np.maximum(test_dataset.outputs.std(axis=0), 1e-8)

    def score(traj):
        scaled = (traj.outputs - test_dataset.outputs) / sigma
        return float((scaled * scaled).mean())

    from .models import simulate  # local import keeps module load order simple
    base_traj = simulate(model, test_dataset.config,
                         (test_dataset.times[0], test_dataset.times[-1]), dt,
                         test_dataset.times)
    final_traj = simulate_final(final, model, test_dataset.config,
                                test_dataset.times, dt=dt)
    loss_base = score(base_traj)
    loss_final = score(final_traj)
    rel = 0.0 if loss_base == 0.0 else (loss_base - loss_final) / loss_base
    return {"loss_base": loss_base, "loss_final": loss_final,
            "rel_improvement": rel}


# ---------------------------------------------------------------------------
# Decisions and the advance state machine.

def _parse_choice(decision: str) -> tuple[str, Optional[str]]:
    if decision in ("accept", "accept-default"):
        return "accept", None
    if decision == "reject":
        return "reject", None
    if decision.startswith("choose:") and len(decision) > len("choose:"):
        return "choose", decision[len("choose:"):]
    raise InvalidDecision(f"unrecognized decision {decision!r}")


def advance(session: Session, store: "SessionStore",
            decision: Optional[str] = None, note: str = "",
            catalog: Optional[ModelCatalog] = None, jobs: int = 1) -> Session:
    """Run the next pipeline stage, or apply a decision at an Awaiting stage."""
    catalog = catalog or builtin_catalog()
    if session.stage in TERMINAL_STAGES:
        raise InvalidDecision(f"session is {session.stage}; nothing to advance")

    if session.stage in _RESUME_BUMP:  # crash recovery: artifacts already stored
        session.stage = _RESUME_BUMP[session.stage]
        store.save(session)
        return session

    if session.stage in AWAITING_STAGES:
        if decision is None:
            raise MissingDecision(f"stage {session.stage} requires a decision")
        kind, arg = _parse_choice(decision)
        if kind == "reject":
            session.decisions.append(Decision(stage=session.stage, choice=decision,
                                              timestamp=time.time(), note=note))
            session.stage = "Rejected"
            store.save(session)
            return session
    elif decision is not None:
        raise InvalidDecision(f"stage {session.stage} does not take a decision")

    model = catalog.get(session.model_name)
    datasets = load_session_datasets(session, catalog)
    pcfg = session.pipeline

    if session.stage == "Created":
        records, best, _plan = pipeline.run_sweep(model, datasets, pcfg, jobs=jobs)
        session.experiments = records
        session.best_experiment = best.id
        mid, nxt = _NEXT_AWAITING["Created"]
        session.stage = mid
        store.save(session)
        session.stage = nxt
        store.save(session)
        return session

    plan = pipeline.fit_normalization(model, [d for d in datasets if d.role == "train"],
                                      substeps=pcfg.substeps)

    if session.stage == "AwaitingArchDecision":
        if kind == "accept":
            chosen = session.best_experiment
        else:
            if arg not in {r.id for r in session.experiments}:
                raise InvalidDecision(f"no experiment {arg!r}")
            chosen = arg
        record = next(r for r in session.experiments if r.id == chosen)
        report = pipeline.run_masking(model, datasets, plan, record, pcfg)
        session.chosen_experiment = chosen
        session.mask_report = report
        _log_and_step(session, store, decision, note, "AwaitingArchDecision")
        return session

    if session.stage == "AwaitingMaskDecision":
        report = session.mask_report
        if kind == "accept":
            k = report.chosen_k
        else:
            try:
                k = int(arg)
            except ValueError:
                raise InvalidDecision(f"mask choice must be an integer K, got {arg!r}") from None
            if not 1 <= k <= len(report.sweep_records):
                raise InvalidDecision(f"K={k} was not part of the mask sweep")
        aug_masked, theta = pipeline.masked_model_for(model, plan, report, k)
        sens = pipeline.run_sensitivity(aug_masked, theta, datasets, pcfg)
        session.chosen_k = k
        session.sensitivity = sens
        _log_and_step(session, store, decision, note, "AwaitingMaskDecision")
        return session

    if session.stage == "AwaitingInputDecision":
        sens = session.sensitivity
        if kind == "accept":
            inputs = list(sens.top_inputs())
            params = pipeline.default_param_selection(model, datasets)
        else:
            inputs, params = _parse_input_choice(arg, sens, model)
        aug_masked, theta = pipeline.masked_model_for(model, plan, session.mask_report,
                                                      session.chosen_k)
        _table, fronts = pipeline.run_symreg(aug_masked, theta, datasets, inputs,
                                             params, pcfg)
        session.selected_inputs = inputs
        session.selected_params = params
        session.pareto = fronts
        session.pareto_targets = list(_table.target_names)
        _log_and_step(session, store, decision, note, "AwaitingInputDecision")
        return session

    if session.stage == "AwaitingExpressionDecision":
        if kind == "choose":
            session.chosen_expressions = _parse_expression_choice(arg, session.pareto)
        else:
            session.chosen_expressions = None
        session.decisions.append(Decision(stage=session.stage, choice=decision,
                                          timestamp=time.time(), note=note))
        final = build_final_model(session, model)
        test_sets = [d for d in datasets if d.role == "test"]
        if test_sets:
            final.validation = validate_final(final, test_sets[0], model,
                                              substeps=pcfg.substeps)
        session.final_model = final
        session.stage = "Finalized"
        store.save(session)
        return session

    raise InvalidDecision(f"cannot advance from stage {session.stage}")


def _log_and_step(session: Session, store: "SessionStore", decision: str, note: str,
                  stage: str) -> None:
    session.decisions.append(Decision(stage=stage, choice=decision,
                                      timestamp=time.time(), note=note))
    mid, nxt = _NEXT_AWAITING[stage]
    session.stage = mid
    store.save(session)
    session.stage = nxt
    store.save(session)


def _parse_input_choice(arg: str, sens: reduction.SensitivityReport,
                        model: DynamicalModel) -> tuple[list[str], list[str]]:
    """``inputs=x,y;params=a,b`` with either part optional."""
    inputs = list(sens.top_inputs())
    params: list[str] = []
    for part in arg.split(";"):
        if not part:
            continue
        key, _, values = part.partition("=")
        names = [v for v in values.split(",") if v]
        if key == "inputs":
            unknown = set(names) - set(sens.input_names)
            if unknown:
                raise InvalidDecision(f"unknown inputs {sorted(unknown)}")
            inputs = names
        elif key == "params":
            unknown = set(names) - set(model.param_names)
            if unknown:
                raise InvalidDecision(f"unknown parameters {sorted(unknown)}")
            params = names
        else:
            raise InvalidDecision(f"bad input choice segment {part!r}")
    return inputs, params


def _parse_expression_choice(arg: str, fronts: list[symreg.ParetoFront]) -> dict[str, int]:
    """``0=2,1=0`` maps target index to front entry index."""
    chosen: dict[str, int] = {}
    for piece in arg.split(","):
        t, _, idx = piece.partition("=")
        try:
            ti, ei = int(t), int(idx)
        except ValueError:
            raise InvalidDecision(f"bad expression choice {piece!r}") from None
        if not 0 <= ti < len(fronts) or not 0 <= ei < len(fronts[ti].entries):
            raise InvalidDecision(f"expression choice {piece!r} out of range")
        chosen[str(ti)] = ei
    return chosen


def run_auto(session: Session, store: "SessionStore",
             catalog: Optional[ModelCatalog] = None, jobs: int = 1) -> Session:
    """Accept-default walk until the session is Finalized or Rejected."""
    while session.stage not in TERMINAL_STAGES:
        decision = "accept" if session.stage in AWAITING_STAGES else None
        session = advance(session, store, decision=decision, catalog=catalog, jobs=jobs)
    return session


# ---------------------------------------------------------------------------
# Serialization.

def _record_to_json(rec: training.ExperimentRecord) -> dict:
    return {
        "id": rec.id,
        "spec": {"input_dim": rec.spec.input_dim, "output_dim": rec.spec.output_dim,
                 "hidden": list(rec.spec.hidden), "activation": rec.spec.activation,
                 "seed": rec.spec.seed},
        "config": dataclasses.asdict(rec.config),
        "loss_history": [float(v) for v in rec.loss_history],
        "final_loss": rec.final_loss,
        "theta_final": [float(v) for v in rec.theta_final],
        "wall_time": rec.wall_time,
        "status": rec.status,
    }


def _record_from_json(d: dict) -> training.ExperimentRecord:
    spec = nn.MLPSpec(input_dim=d["spec"]["input_dim"], output_dim=d["spec"]["output_dim"],
                      hidden=tuple(d["spec"]["hidden"]), activation=d["spec"]["activation"],
                      seed=d["spec"]["seed"])
    return training.ExperimentRecord(
        id=d["id"], spec=spec, config=training.TrainingConfig(**d["config"]),
        loss_history=list(d["loss_history"]), final_loss=d["final_loss"],
        theta_final=np.asarray(d["theta_final"], dtype=float),
        wall_time=d["wall_time"], status=d["status"])


def _mask_report_to_json(r: reduction.MaskReport) -> dict:
    return {
        "ratios": [float(v) for v in r.ratios],
        "ordering": [int(v) for v in r.ordering],
        "sweep": [[int(k), float(l)] for k, l in r.sweep],
        "chosen_K": r.chosen_k,
        "tolerance": r.tolerance,
        "full_loss": r.full_loss,
        "feasible": r.feasible,
        "records": [_record_to_json(rec) for rec in r.sweep_records],
        "equation_names": list(r.equation_names),
    }


def _mask_report_from_json(d: dict) -> reduction.MaskReport:
    records = tuple(_record_from_json(rd) for rd in d["records"])
    return reduction.MaskReport(
        ratios=np.asarray(d["ratios"], dtype=float),
        ordering=np.asarray(d["ordering"], dtype=int),
        sweep=[(int(k), float(l)) for k, l in d["sweep"]],
        chosen_k=int(d["chosen_K"]), tolerance=float(d["tolerance"]),
        full_loss=float(d["full_loss"]), feasible=bool(d["feasible"]),
        chosen_record=records[min(int(d["chosen_K"]), len(records)) - 1],
        sweep_records=records, equation_names=tuple(d["equation_names"]))


def _sensitivity_to_json(s: reduction.SensitivityReport) -> dict:
    return {"jac": [[float(v) for v in row] for row in s.jac],
            "input_ranking": [int(v) for v in s.input_ranking],
            "top_m": s.top_m, "input_names": list(s.input_names),
            "output_names": list(s.output_names)}


def _sensitivity_from_json(d: dict) -> reduction.SensitivityReport:
    return reduction.SensitivityReport(
        jac=np.asarray(d["jac"], dtype=float),
        input_ranking=np.asarray(d["input_ranking"], dtype=int),
        top_m=int(d["top_m"]), input_names=tuple(d["input_names"]),
        output_names=tuple(d["output_names"]))


def session_to_json(session: Session) -> dict:
    return {
        "id": session.id,
        "model": session.model_name,
        "stage": session.stage,
        "datasets": [{"id": r.id, "csv_path": r.csv_path, "role": r.role,
                      "config": r.config} for r in session.datasets],
        "pipeline": session.pipeline.to_jsonable(),
        "experiments": [_record_to_json(r) for r in session.experiments],
        "mask_report": (_mask_report_to_json(session.mask_report)
                        if session.mask_report else None),
        "sensitivity": (_sensitivity_to_json(session.sensitivity)
                        if session.sensitivity else None),
        "pareto": ([f.to_jsonable() for f in session.pareto]
                   if session.pareto is not None else None),
        "decisions": [{"stage": d.stage, "choice": d.choice,
                       "timestamp": d.timestamp, "note": d.note}
                      for d in session.decisions],
        "final_model": (dataclasses.asdict(session.final_model)
                        if session.final_model else None),
        "progress": {
            "best_experiment": session.best_experiment,
            "chosen_experiment": session.chosen_experiment,
            "chosen_K": session.chosen_k,
            "selected_inputs": session.selected_inputs,
            "selected_params": session.selected_params,
            "pareto_targets": session.pareto_targets,
            "chosen_expressions": session.chosen_expressions,
        },
    }


def session_from_json(d: dict) -> Session:
    progress = d.get("progress", {})
    session = Session(
        id=d["id"], model_name=d["model"], stage=d["stage"],
        datasets=[DatasetRef(**ref) for ref in d["datasets"]],
        pipeline=pipeline.PipelineConfig.from_jsonable(d["pipeline"]),
        experiments=[_record_from_json(r) for r in d.get("experiments") or []],
        best_experiment=progress.get("best_experiment"),
        chosen_experiment=progress.get("chosen_experiment"),
        chosen_k=progress.get("chosen_K"),
        selected_inputs=progress.get("selected_inputs"),
        selected_params=progress.get("selected_params"),
        pareto_targets=progress.get("pareto_targets"),
        chosen_expressions=progress.get("chosen_expressions"),
        decisions=[Decision(**dd) for dd in d.get("decisions") or []],
    )
    if d.get("mask_report"):
        session.mask_report = _mask_report_from_json(d["mask_report"])
    if d.get("sensitivity"):
        session.sensitivity = _sensitivity_from_json(d["sensitivity"])
    if d.get("pareto") is not None:
        session.pareto = [symreg.ParetoFront.from_jsonable(f) for f in d["pareto"]]
    if d.get("final_model"):
        fm = d["final_model"]
        session.final_model = FinalModel(base_model=fm["base_model"],
                                         expressions=dict(fm["expressions"]),
                                         provenance=dict(fm["provenance"]),
                                         validation=fm.get("validation"))
    return session


class SessionStore:
    """One JSON file per session, written atomically via rename."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._locks: dict[str, threading.Lock] = {}
        self._registry_lock = threading.Lock()

    def path(self, session_id: str) -> Path:
        return self.root / f"{session_id}.json"

    def lock(self, session_id: str) -> threading.Lock:
        with self._registry_lock:
            return self._locks.setdefault(session_id, threading.Lock())

    def save(self, session: Session) -> None:
        payload = json.dumps(session_to_json(session), indent=2, sort_keys=True)
        tmp = self.path(session.id).with_suffix(".json.tmp")
        tmp.write_text(payload)
        os.replace(tmp, self.path(session.id))

    def load(self, session_id: str) -> Session:
        path = self.path(session_id)
        if not path.exists():
            raise UnknownSession(session_id)
        return session_from_json(json.loads(path.read_text()))

    def list_ids(self) -> list[str]:
        return sorted(p.stem for p in self.root.glob("*.json"))

    def summaries(self) -> list[dict]:
        out = []
        for sid in self.list_ids():
            s = self.load(sid)
            out.append({"id": s.id, "model": s.model_name, "stage": s.stage})
        return out
