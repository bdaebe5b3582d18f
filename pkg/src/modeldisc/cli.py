"""Command-line front door: data generation, sessions, review service, exports.

Exit codes: 0 success, 1 usage error, 2 pipeline failure (diverged sweep or
no feasible mask).  Errors go to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import pipeline, report, session as sessions, training
from .errors import ModelDiscError
from .models import builtin_catalog, simulate
from .session import DatasetRef, SessionStore

DEFAULT_STORE = "modeldisc_store"


def store_dir(args) -> str:
    return args.store or os.environ.get("MODELDISC_STORE") or DEFAULT_STORE


def parse_config(text: str) -> dict[str, float]:
    config: dict[str, float] = {}
    if not text:
        return config
    for item in text.split(","):
        key, _, value = item.partition("=")
        if not key or not value:
            raise ValueError(f"bad config entry {item!r}; expected k=v")
        config[key] = float(value)
    return config


def parse_dataset_arg(text: str, role: str, index: int) -> DatasetRef:
    path, _, cfg = text.partition(":")
    if not path:
        raise ValueError(f"bad dataset argument {text!r}; expected path.csv[:k=v,...]")
    return DatasetRef(id=Path(path).stem, csv_path=path, role=role,
                      config=parse_config(cfg))


def cmd_generate(args) -> int:
    catalog = builtin_catalog()
    model = catalog.get(args.model)
    p = model.params_from(parse_config(args.config))
    times = np.linspace(args.t_start, args.t_end, args.samples)
    dt = args.dt if args.dt else (times[1] - times[0]) / 20.0
    traj = simulate(model, p, (args.t_start, args.t_end), dt, times)
    training.save_dataset_csv(args.out, traj.times, traj.outputs, model.output_names)
    print(f"wrote {args.samples} samples of {args.model} to {args.out}")
    return 0


def _pipeline_config(args) -> pipeline.PipelineConfig:
    kwargs = {"seed": args.seed}
    if args.sweep:
        hidden = tuple(tuple(int(w) for w in spec.split(",") if w)
                       for spec in args.sweep.split(";") if spec)
        kwargs["sweep_hidden"] = hidden
    for name in ("substeps", "pretrain_iters", "train_iters", "train_patience",
                 "top_m", "symreg_population", "symreg_generations"):
        value = getattr(args, name)
        if value is not None:
            kwargs[name] = value
    if args.mask_tolerance is not None:
        kwargs["mask_tolerance"] = args.mask_tolerance
    return pipeline.PipelineConfig(**kwargs)


def cmd_session_new(args) -> int:
    refs = [parse_dataset_arg(t, "train", i) for i, t in enumerate(args.train)]
    refs += [parse_dataset_arg(t, "test", i) for i, t in enumerate(args.test or [])]
    session = sessions.new_session(args.model, refs, _pipeline_config(args))
    store = SessionStore(store_dir(args))
    store.save(session)
    print(session.id)
    return 0


def _terminal_status(session) -> int:
    if session.stage == "Rejected":
        return 0
    bad_sweep = all(r.status == "diverged" for r in session.experiments or [])
    infeasible = session.mask_report is not None and not session.mask_report.feasible
    if bad_sweep or infeasible:
        reason = "sweep diverged" if bad_sweep else "no feasible mask size"
        print(f"pipeline failure: {reason}", file=sys.stderr)
        return 2
    return 0


def cmd_session_advance(args) -> int:
    store = SessionStore(store_dir(args))
    session = store.load(args.id)
    if args.auto:
        session = sessions.run_auto(session, store, jobs=args.jobs)
        print(f"{session.id}: {session.stage}")
        return _terminal_status(session)
    session = sessions.advance(session, store, decision=args.decision,
                               note=args.note or "", jobs=args.jobs)
    print(f"{session.id}: {session.stage}")
    if session.stage in sessions.TERMINAL_STAGES:
        return _terminal_status(session)
    return 0


def cmd_session_show(args) -> int:
    store = SessionStore(store_dir(args))
    session = store.load(args.id)
    doc = sessions.session_to_json(session)
    if args.json:
        print(json.dumps(doc, indent=2, sort_keys=True))
        return 0
    print(f"session   {session.id}")
    print(f"model     {session.model_name}")
    print(f"stage     {session.stage}")
    for ref in session.datasets:
        print(f"dataset   {ref.id} [{ref.role}] {ref.csv_path}")
    if session.experiments:
        best = session.best_experiment
        print(f"sweep     {len(session.experiments)} runs, best {best}")
    if session.mask_report:
        print(f"mask      chosen K = {session.mask_report.chosen_k} "
              f"(feasible={session.mask_report.feasible})")
    if session.sensitivity:
        print(f"inputs    top: {', '.join(session.sensitivity.top_inputs())}")
    if session.pareto is not None:
        sizes = ", ".join(str(len(f.entries)) for f in session.pareto)
        print(f"pareto    front sizes: {sizes}")
    if session.final_model:
        for eq, expr in session.final_model.expressions.items():
            print(f"accepted  d{eq}/dt += {expr}")
        if session.final_model.validation:
            v = session.final_model.validation
            print(f"validation base={v['loss_base']:.3e} final={v['loss_final']:.3e} "
                  f"improvement={v['rel_improvement']:.1%}")
    for d in session.decisions:
        print(f"decision  [{d.stage}] {d.choice} {d.note}")
    return 0


def cmd_serve(args) -> int:
    from .service import serve

    serve(store_dir(args), bind=args.bind, jobs=args.jobs)
    return 0


def cmd_export(args) -> int:
    store = SessionStore(store_dir(args))
    doc = sessions.session_to_json(store.load(args.id))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    png = out.with_suffix(".png")

    if args.artifact == "heatmap":
        sens = doc.get("sensitivity")
        if not sens:
            print("sensitivity not available yet (session not Analyzed)", file=sys.stderr)
            return 1
        with open(out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["output", *sens["input_names"]])
            for name, row in zip(sens["output_names"], sens["jac"]):
                writer.writerow([name, *row])
        report.save_figure(report.heatmap_figure(sens), png)
    elif args.artifact == "pareto":
        fronts = doc.get("pareto")
        if not fronts:
            print("pareto fronts not available yet (session not Regressed)",
                  file=sys.stderr)
            return 1
        targets = doc["progress"].get("pareto_targets")
        out.write_text(json.dumps({"targets": targets, "fronts": fronts}, indent=2))
        report.save_figure(report.pareto_figure(fronts, targets), png)
    else:  # sweep
        recs = doc.get("experiments")
        if not recs:
            print("sweep not available yet (session not Trained)", file=sys.stderr)
            return 1
        with open(out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "hidden", "activation", "seed", "n_params",
                             "final_loss", "iterations", "wall_time", "status"])
            for rec in recs:
                writer.writerow([
                    rec["id"], "x".join(str(h) for h in rec["spec"]["hidden"]) or "linear",
                    rec["spec"]["activation"], rec["spec"]["seed"], "",
                    rec["final_loss"], len(rec["loss_history"]), rec["wall_time"],
                    rec["status"]])
        report.save_figure(report.sweep_figure(recs), png)
    print(f"wrote {out} and {png}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="modeldisc",
                                     description="model discovery toolkit")
    parser.add_argument("--store", help="session store directory "
                        "(default: $MODELDISC_STORE or ./modeldisc_store)")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="simulate a catalog model to telemetry CSV")
    gen.add_argument("--model", required=True)
    gen.add_argument("--config", default="", help="comma-separated k=v overrides")
    gen.add_argument("--out", required=True)
    gen.add_argument("--t-start", type=float, default=0.0)
    gen.add_argument("--t-end", type=float, default=5.0)
    gen.add_argument("--samples", type=int, default=101)
    gen.add_argument("--dt", type=float, default=None,
                     help="integration step (default: sample spacing / 20)")
    gen.set_defaults(fn=cmd_generate)

    ses = sub.add_parser("session", help="create and drive sessions")
    ssub = ses.add_subparsers(dest="session_command", required=True)

    new = ssub.add_parser("new")
    new.add_argument("--model", required=True)
    new.add_argument("--train", nargs="+", required=True,
                     metavar="CSV[:k=v,...]")
    new.add_argument("--test", nargs="*", metavar="CSV[:k=v,...]")
    new.add_argument("--seed", type=int, default=42)
    new.add_argument("--sweep", help="hidden sizes, e.g. '8;16;16,16'")
    new.add_argument("--substeps", type=int, default=None)
    new.add_argument("--pretrain-iters", type=int, default=None)
    new.add_argument("--train-iters", type=int, default=None)
    new.add_argument("--train-patience", type=int, default=None)
    new.add_argument("--mask-tolerance", type=float, default=None)
    new.add_argument("--top-m", type=int, default=None)
    new.add_argument("--symreg-population", type=int, default=None)
    new.add_argument("--symreg-generations", type=int, default=None)
    new.set_defaults(fn=cmd_session_new)

    adv = ssub.add_parser("advance")
    adv.add_argument("id")
    adv.add_argument("--decision", help="accept | choose:<x> | reject")
    adv.add_argument("--note", default="")
    adv.add_argument("--auto", action="store_true",
                     help="accept-default walk to a terminal stage")
    adv.add_argument("--jobs", type=int, default=training.default_jobs())
    adv.set_defaults(fn=cmd_session_advance)

    show = ssub.add_parser("show")
    show.add_argument("id")
    show.add_argument("--json", action="store_true")
    show.set_defaults(fn=cmd_session_show)

    srv = sub.add_parser("serve", help="run the review HTTP service")
    srv.add_argument("--bind", default="127.0.0.1:8731")
    srv.add_argument("--jobs", type=int, default=training.default_jobs())
    srv.set_defaults(fn=cmd_serve)

    exp = sub.add_parser("export", help="write an artifact (CSV/JSON + PNG)")
    exp.add_argument("artifact", choices=["heatmap", "pareto", "sweep"])
    exp.add_argument("id")
    exp.add_argument("--out", required=True)
    exp.set_defaults(fn=cmd_export)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    try:
        return args.fn(args)
    except ModelDiscError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
