"""Stage runners shared by the session state machine and the CLI.

The discovery pipeline trains each correction network in two phases: a fast
supervised pre-fit against spline-estimated derivative residuals of the
telemetry (collocation), then Adam on the true trajectory loss.  Plain
full-horizon trajectory training from a cold start reliably stalls an order
of magnitude above the reachable optimum on multi-configuration data; the
pre-fit lands the weights inside the right basin first.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.interpolate import CubicSpline

from . import nn, reduction, symreg, training, ude
from .errors import InvalidModel
from .models import DynamicalModel


@dataclass(frozen=True)
class PipelineConfig:
    """Every knob of an automated run; persisted whole into the session file."""

    seed: int = 42
    substeps: int = 1
    # architecture sweep
    sweep_hidden: tuple[tuple[int, ...], ...] = ((8,), (16,), (16, 16))
    sweep_activations: tuple[str, ...] = ("tanh",)
    sweep_seeds: tuple[int, ...] = (0,)
    # collocation pre-fit
    pretrain_iters: int = 1500
    pretrain_lr: float = 1e-2
    # trajectory fine-tune
    train_lr: float = 3e-3
    train_iters: int = 400
    train_patience: int = 150
    # reduction
    mask_tolerance: float = 1.05
    top_m: int = 7
    # symbolic regression
    symreg_population: int = 500
    symreg_generations: int = 200
    symreg_max_complexity: int = 25

    def training_config(self, seed: int = 0) -> training.TrainingConfig:
        return training.TrainingConfig(lr=self.train_lr, max_iters=self.train_iters,
                                       patience=self.train_patience, seed=seed)

    def sweep_specs(self, input_dim: int, output_dim: int) -> list[nn.MLPSpec]:
        return training.default_sweep_specs(
            input_dim, output_dim, hidden_grid=self.sweep_hidden,
            activations=self.sweep_activations, seeds=self.sweep_seeds)

    def symreg_config(self) -> symreg.SymRegConfig:
        return symreg.SymRegConfig(population=self.symreg_population,
                                   generations=self.symreg_generations,
                                   max_complexity=self.symreg_max_complexity,
                                   seed=self.seed)

    def to_jsonable(self) -> dict:
        d = dataclasses.asdict(self)
        d["sweep_hidden"] = [list(h) for h in self.sweep_hidden]
        d["sweep_activations"] = list(self.sweep_activations)
        d["sweep_seeds"] = list(self.sweep_seeds)
        return d

    @staticmethod
    def from_jsonable(d: dict) -> "PipelineConfig":
        d = dict(d)
        d["sweep_hidden"] = tuple(tuple(int(x) for x in h) for h in d["sweep_hidden"])
        d["sweep_activations"] = tuple(d["sweep_activations"])
        d["sweep_seeds"] = tuple(int(s) for s in d["sweep_seeds"])
        return PipelineConfig(**d)


# ---------------------------------------------------------------------------
# Normalization policy.  Observed states take their statistics straight from
# the telemetry; hidden states fall back to the base-model rollout at the same
# configuration.  Output scales per equation come from the matching derivative
# estimate (spline slope of the data when observed, rollout derivative when
# not), so correction magnitudes start commensurate with realistic rates.

def _observed_state_positions(model: DynamicalModel) -> dict[int, int]:
    """state index -> output column, for states measured directly."""
    out_pos = {name: i for i, name in enumerate(model.output_names)}
    return {si: out_pos[name] for si, name in enumerate(model.state_names)
            if name in out_pos}


def _spline_derivatives(ds) -> np.ndarray:
    return np.stack([CubicSpline(ds.times, ds.outputs[:, c])(ds.times, 1)
                     for c in range(ds.outputs.shape[1])], axis=1)


def _assimilated_states(model: DynamicalModel, ds, substeps: int = 1) -> np.ndarray:
    """State estimates along the telemetry: observed states are reset to the
    data at every sample while the hidden ones integrate the base dynamics
    between samples.  Far closer to the truth than an open-loop rollout when
    the base model is missing physics in the observed equations."""
    observed = _observed_state_positions(model)
    p = ds.config
    dt = ude.grid_dt(ds.times) / max(1, substeps)
    u = np.asarray(model.u0_map(p), dtype=float).copy()
    out = np.empty((len(ds.times), model.n_states))
    n_d = model.n_diff
    for i, t in enumerate(ds.times):
        for si, oc in observed.items():
            u[si] = ds.outputs[i, oc]
        out[i] = u
        if i + 1 == len(ds.times):
            break
        t_next = float(ds.times[i + 1])
        tt = float(t)
        while tt < t_next - 1e-12:
            h = min(dt, t_next - tt)
            x = model.exogenous_at(tt)
            k1 = np.asarray(model.rhs(u, x, p, tt), dtype=float)
            k2 = np.asarray(model.rhs(_step(u, k1, 0.5 * h, n_d), x, p, tt + 0.5 * h),
                            dtype=float)
            k3 = np.asarray(model.rhs(_step(u, k2, 0.5 * h, n_d), x, p, tt + 0.5 * h),
                            dtype=float)
            k4 = np.asarray(model.rhs(_step(u, k3, h, n_d), x, p, tt + h), dtype=float)
            u = _step(u, (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0, h, n_d)
            tt += h
    return out


def _step(u: np.ndarray, du: np.ndarray, h: float, n_d: int) -> np.ndarray:
    out = u.copy()
    out[:n_d] = u[:n_d] + h * du
    return out


@dataclass(frozen=True)
class NormalizationPlan:
    """Full-width normalizer plus the hybrid states used to build it."""

    input_shift: np.ndarray        # per state
    input_scale: np.ndarray        # per state
    output_scale: np.ndarray       # per differential equation
    hybrid_states: dict[str, np.ndarray]   # dataset id -> (n, n_states)
    data_derivs: dict[str, np.ndarray]     # dataset id -> (n, n_out) spline slopes

    def slice(self, input_idx: np.ndarray, eq_idx: np.ndarray) -> nn.Normalizer:
        return nn.Normalizer(input_shift=self.input_shift[input_idx],
                             input_scale=self.input_scale[input_idx],
                             output_scale=self.output_scale[eq_idx])


def fit_normalization(model: DynamicalModel, datasets,
                      substeps: int = 1) -> NormalizationPlan:
    observed = _observed_state_positions(model)
    state_blocks, deriv_blocks = [], []
    hybrid, slopes = {}, {}
    for ds in datasets:
        states = _assimilated_states(model, ds, substeps=substeps)
        derivs = np.stack([
            np.asarray(model.rhs(u, model.exogenous_at(t), ds.config, t), dtype=float)
            for u, t in zip(states, ds.times)])
        data_d = _spline_derivatives(ds)
        for si, oc in observed.items():
            if si < model.n_diff:
                derivs[:, si] = data_d[:, oc]
        state_blocks.append(states)
        deriv_blocks.append(derivs)
        hybrid[ds.id] = states
        slopes[ds.id] = data_d
    norm = nn.fit_normalizer(np.vstack(state_blocks), np.vstack(deriv_blocks))
    return NormalizationPlan(input_shift=norm.input_shift, input_scale=norm.input_scale,
                             output_scale=norm.output_scale, hybrid_states=hybrid,
                             data_derivs=slopes)


def build_initial_augmented(model: DynamicalModel, plan: NormalizationPlan,
                            hidden: Sequence[int] = (16,), activation: str = "tanh",
                            seed: int = 0) -> ude.AugmentedModel:
    """All states in, all differential equations out (the starting shape)."""
    aug = ude.build_augmented(model, hidden=hidden, activation=activation, seed=seed)
    norm = plan.slice(aug.input_indices, aug.output_indices)
    return dataclasses.replace(aug, normalizer=norm)


# ---------------------------------------------------------------------------
# Staged training: collocation pre-fit, then trajectory Adam.

def collocation_pretrain(aug: ude.AugmentedModel, datasets, plan: NormalizationPlan,
                         iters: int, lr: float) -> np.ndarray:
    """Supervised pre-fit of the correction onto derivative-residual estimates.

    Targets for equations of observed states are spline slope minus the base
    rhs at the hybrid state; equations of hidden states target zero (stay at
    base dynamics until the trajectory phase says otherwise).
    """
    base = aug.base
    observed = _observed_state_positions(base)
    inputs, targets = [], []
    for ds in datasets:
        states = plan.hybrid_states[ds.id]
        data_d = plan.data_derivs[ds.id]
        rhs_rows = np.stack([
            np.asarray(base.rhs(u, base.exogenous_at(t), ds.config, t), dtype=float)
            for u, t in zip(states, ds.times)])
        resid = np.zeros((len(ds.times), base.n_diff))
        for si, oc in observed.items():
            if si < base.n_diff:
                resid[:, si] = data_d[:, oc] - rhs_rows[:, si]
        inputs.append(aug.normalizer.normalize(states[:, aug.input_indices]))
        targets.append(resid[:, aug.output_indices] / aug.normalizer.output_scale)
    theta0 = aug.init_weights()
    return nn.supervised_fit(aug.spec, theta0, np.vstack(inputs), np.vstack(targets),
                             iters=iters, lr=lr)


def staged_train(args) -> training.ExperimentRecord:
    """Sweep/mask trainer: pre-fit then fine-tune.  Picklable for worker pools."""
    aug, datasets, cfg, dt, run_id, plan, pcfg = args
    theta0 = collocation_pretrain(aug, datasets, plan,
                                  iters=pcfg.pretrain_iters, lr=pcfg.pretrain_lr)
    return training.train(aug, datasets, cfg, init_theta=theta0, dt=dt,
                          run_id=run_id, substeps=pcfg.substeps)


class _StagedTrainer:
    """Adapter matching the trainer protocols of sweep and mask search."""

    def __init__(self, plan: NormalizationPlan, pcfg: PipelineConfig):
        self.plan = plan
        self.pcfg = pcfg

    def __call__(self, args):
        aug, datasets, cfg, dt, run_id = args
        return staged_train((aug, datasets, cfg, dt, run_id, self.plan, self.pcfg))


# ---------------------------------------------------------------------------
# Stage runners.

def run_sweep(model: DynamicalModel, datasets, pcfg: PipelineConfig,
              jobs: int = 1) -> tuple[list[training.ExperimentRecord],
                                      training.ExperimentRecord, NormalizationPlan]:
    train_sets = [d for d in datasets if d.role == "train"]
    if not train_sets:
        raise InvalidModel("session has no training datasets")
    plan = fit_normalization(model, train_sets, substeps=pcfg.substeps)
    aug = build_initial_augmented(model, plan)
    specs = pcfg.sweep_specs(aug.spec.input_dim, aug.spec.output_dim)
    records, best = training.architecture_sweep(
        aug, train_sets, specs, pcfg.training_config(), jobs=jobs,
        trainer=_StagedTrainer(plan, pcfg))
    return records, best, plan


def augmented_for_record(model: DynamicalModel, plan: NormalizationPlan,
                         record: training.ExperimentRecord) -> ude.AugmentedModel:
    aug = ude.build_augmented(model, hidden=record.spec.hidden,
                              activation=record.spec.activation, seed=record.spec.seed)
    return dataclasses.replace(aug, spec=record.spec,
                               normalizer=plan.slice(aug.input_indices, aug.output_indices))


def run_masking(model: DynamicalModel, datasets, plan: NormalizationPlan,
                record: training.ExperimentRecord,
                pcfg: PipelineConfig) -> reduction.MaskReport:
    train_sets = [d for d in datasets if d.role == "train"]
    aug = augmented_for_record(model, plan, record)
    ratios = reduction.output_significance(aug, record.theta_final, train_sets,
                                           substeps=pcfg.substeps)
    trainer = _StagedTrainer(plan, pcfg)

    def mask_trainer(variant, run_id):
        return trainer((variant, train_sets, pcfg.training_config(), None, run_id))

    return reduction.mask_search(aug, train_sets, ratios, pcfg.training_config(),
                                 record.final_loss, tolerance=pcfg.mask_tolerance,
                                 trainer=mask_trainer)


def masked_model_for(model: DynamicalModel, plan: NormalizationPlan,
                     report: reduction.MaskReport, k: int) -> tuple[ude.AugmentedModel,
                                                                    np.ndarray]:
    """The retrained K-output model and its weights."""
    rec = report.sweep_records[k - 1]
    equations = reduction.significance_ordering(report.ratios)[:k]
    mask = np.zeros(model.n_diff, dtype=bool)
    mask[np.asarray(equations, dtype=int)] = True
    aug = ude.AugmentedModel(
        base=model, spec=rec.spec,
        normalizer=plan.slice(np.arange(model.n_states), np.flatnonzero(mask)),
        input_mask=np.ones(model.n_states, dtype=bool), output_mask=mask)
    return aug, rec.theta_final


def run_sensitivity(aug_masked: ude.AugmentedModel, theta: np.ndarray, datasets,
                    pcfg: PipelineConfig) -> reduction.SensitivityReport:
    train_sets = [d for d in datasets if d.role == "train"]
    return reduction.sensitivity(aug_masked, theta, train_sets, top_m=pcfg.top_m,
                                 substeps=pcfg.substeps)


def default_param_selection(model: DynamicalModel, datasets) -> list[str]:
    """Parameters that actually differ across the training configurations."""
    train_sets = [d for d in datasets if d.role == "train"]
    names = []
    for i, name in enumerate(model.param_names):
        values = {float(ds.config[i]) for ds in train_sets}
        if len(values) > 1:
            names.append(name)
    return names


def run_symreg(aug_masked: ude.AugmentedModel, theta: np.ndarray, datasets,
               selected_inputs: Sequence[str], selected_params: Sequence[str],
               pcfg: PipelineConfig) -> tuple[symreg.RegressionTable,
                                              list[symreg.ParetoFront]]:
    train_sets = [d for d in datasets if d.role == "train"]
    table = symreg.build_regression_table(aug_masked, theta, train_sets,
                                          selected_inputs, selected_params,
                                          substeps=pcfg.substeps)
    fronts = symreg.evolve(table, pcfg.symreg_config())
    return table, fronts
