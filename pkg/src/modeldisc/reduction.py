"""Shrinking a trained correction: output masking and input sensitivity ranking."""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import nn, training, ude
from .errors import InvalidModel

RATIO_FLOOR = 1e-12


@dataclass(frozen=True)
class MaskReport:
    """Per-equation significance ratios and the retrained mask sweep."""

    ratios: np.ndarray                 # one per differential equation
    ordering: np.ndarray               # equation indices, descending ratio
    sweep: list[tuple[int, float]]     # (K, retrained final loss)
    chosen_k: int
    tolerance: float
    full_loss: float
    feasible: bool
    chosen_record: training.ExperimentRecord
    sweep_records: tuple[training.ExperimentRecord, ...]   # one per swept K
    equation_names: tuple[str, ...]

    def chosen_equations(self) -> np.ndarray:
        return np.sort(self.ordering[: self.chosen_k])


@dataclass(frozen=True)
class SensitivityReport:
    """Mean absolute input-output Jacobian over all training samples."""

    jac: np.ndarray                    # (n_selected_outputs, n_inputs)
    input_ranking: np.ndarray          # input positions by descending column norm
    top_m: int
    input_names: tuple[str, ...]
    output_names: tuple[str, ...]

    def top_inputs(self) -> tuple[str, ...]:
        return tuple(self.input_names[i] for i in self.input_ranking[: self.top_m])


def correction_matrix(aug: ude.AugmentedModel, theta: np.ndarray,
                      states: np.ndarray) -> np.ndarray:
    """Scaled corrections for a whole (n_samples, n_states) state matrix."""
    corr = np.zeros((states.shape[0], aug.base.n_diff))
    if not aug.output_mask.any():
        return corr
    z = aug.normalizer.normalize(states[:, aug.input_indices])
    out = nn.forward(aug.spec, theta, z)
    corr[:, aug.output_indices] = out * aug.normalizer.output_scale
    return corr


def output_significance(aug: ude.AugmentedModel, theta: np.ndarray, datasets,
                        dt: Optional[float] = None, substeps: int = 1) -> np.ndarray:
    """Per equation: max |correction| over the fit, relative to max |derivative|.

    The denominator is the full augmented derivative of the same equation, so
    the ratio is dimensionless; unmasked equations report 0.
    """
    n_diff = aug.base.n_diff
    max_num = np.zeros(n_diff)
    max_den = np.zeros(n_diff)
    for ds in datasets:
        traj = ude.simulate_augmented(aug, theta, ds.config, ds.times, dt=dt,
                                      substeps=substeps)
        corr = correction_matrix(aug, theta, traj.states)
        max_num = np.maximum(max_num, np.max(np.abs(corr), axis=0))
        max_den = np.maximum(max_den, np.max(np.abs(traj.derivatives), axis=0))
    return max_num / np.maximum(max_den, RATIO_FLOOR)


def significance_ordering(ratios: np.ndarray) -> np.ndarray:
    """Equation indices sorted by descending ratio; ties keep ascending index."""
    idx = np.arange(len(ratios))
    return idx[np.lexsort((idx, -np.asarray(ratios)))]


def masked_variant(aug: ude.AugmentedModel, equations: Sequence[int]) -> ude.AugmentedModel:
    """Same architecture and inputs, outputs restricted to ``equations``.

    The source model must already correct every equation being selected, so
    output scales can be carried over per equation.
    """
    eq = np.sort(np.asarray(equations, dtype=int))
    positions = {int(e): i for i, e in enumerate(aug.output_indices)}
    missing = [int(e) for e in eq if int(e) not in positions]
    if missing:
        raise InvalidModel(f"equations {missing} are outside the source output mask")
    mask = np.zeros(aug.base.n_diff, dtype=bool)
    mask[eq] = True
    scale = aug.normalizer.output_scale[[positions[int(e)] for e in eq]]
    spec = dataclasses.replace(aug.spec, output_dim=len(eq))
    norm = nn.Normalizer(input_shift=aug.normalizer.input_shift,
                         input_scale=aug.normalizer.input_scale,
                         output_scale=scale)
    return ude.AugmentedModel(base=aug.base, spec=spec, normalizer=norm,
                              input_mask=aug.input_mask, output_mask=mask)


def mask_search(aug: ude.AugmentedModel, datasets, ratios: np.ndarray,
                cfg: training.TrainingConfig, full_loss: float,
                tolerance: float = 1.05, dt: Optional[float] = None,
                trainer=None) -> MaskReport:
    """Grow the mask along the ratio ordering, retraining from scratch at each K.

    Stops at the first K whose retrained loss is within ``tolerance`` of the
    full-output loss.  If no K qualifies the full mask is returned with the
    report flagged infeasible for the engineer to judge.  ``trainer``
    overrides how each K is retrained so the caller can apply the same
    schedule that produced the full-output network.
    """
    if trainer is None:
        def trainer(variant, run_id):
            return training.train(variant, datasets, cfg, dt=dt, run_id=run_id)
    ordering = significance_ordering(ratios)
    n_eq = int(aug.output_mask.sum())
    sweep: list[tuple[int, float]] = []
    records: list[training.ExperimentRecord] = []
    chosen = None
    record = None
    for k in range(1, n_eq + 1):
        variant = masked_variant(aug, ordering[:k])
        rec = trainer(variant, f"mask-K{k}")
        sweep.append((k, rec.final_loss))
        records.append(rec)
        if rec.final_loss <= tolerance * full_loss:
            chosen, record = k, rec
            break
    feasible = chosen is not None
    if not feasible:
        chosen = n_eq
        record = records[-1]  # the K = n_eq retrain, i.e. the full mask
    eq_names = tuple(aug.base.state_names[i] for i in range(aug.base.n_diff))
    return MaskReport(ratios=np.asarray(ratios, dtype=float), ordering=ordering,
                      sweep=sweep, chosen_k=chosen, tolerance=float(tolerance),
                      full_loss=float(full_loss), feasible=feasible,
                      chosen_record=record, sweep_records=tuple(records),
                      equation_names=eq_names)


def sensitivity(aug_masked: ude.AugmentedModel, theta: np.ndarray, datasets,
                top_m: int = 7, dt: Optional[float] = None,
                substeps: int = 1) -> SensitivityReport:
    """Mean |input-output Jacobian| in physical units, sampled along the fit.

    Jacobians are taken in normalized input space and rescaled by the inverse
    input scales; columns are ranked by Euclidean norm, ties by input index.
    """
    in_idx = aug_masked.input_indices
    n_in = len(in_idx)
    acc = np.zeros((aug_masked.spec.output_dim, n_in))
    count = 0
    for ds in datasets:
        traj = ude.simulate_augmented(aug_masked, theta, ds.config, ds.times, dt=dt,
                                      substeps=substeps)
        z = aug_masked.normalizer.normalize(traj.states[:, in_idx])
        for row in z:
            jac = nn.jacobian(aug_masked.spec, theta, row)
            acc += np.abs(jac / aug_masked.normalizer.input_scale)
            count += 1
    jac_mean = acc / max(count, 1)
    norms = np.linalg.norm(jac_mean, axis=0)
    pos = np.arange(n_in)
    ranking = pos[np.lexsort((pos, -norms))]
    input_names = tuple(aug_masked.base.state_names[i] for i in in_idx)
    output_names = tuple(aug_masked.base.state_names[i] for i in aug_masked.output_indices)
    return SensitivityReport(jac=jac_mean, input_ranking=ranking,
                             top_m=min(top_m, n_in), input_names=input_names,
                             output_names=output_names)


def heatmap_rows(report: SensitivityReport) -> list[list]:
    """Tabular heatmap: first row input labels, then one row per output."""
    rows: list[list] = [["output", *report.input_names]]
    for name, row in zip(report.output_names, report.jac):
        rows.append([name, *[float(v) for v in row]])
    return rows


def write_heatmap_csv(report: SensitivityReport, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(heatmap_rows(report))
