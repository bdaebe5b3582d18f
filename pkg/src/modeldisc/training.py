"""Adam training of augmented models, architecture sweeps, experiment records."""

from __future__ import annotations

import csv
import dataclasses
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import nn, ude
from .errors import DimensionMismatch, InvalidModel
from .models import DynamicalModel


@dataclass(frozen=True)
class TimeSeriesDataset:
    """One experiment: sampled outputs on a time grid plus its configuration."""

    id: str
    times: np.ndarray
    outputs: np.ndarray
    config: np.ndarray
    role: str = "train"

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        outputs = np.atleast_2d(np.asarray(self.outputs, dtype=float))
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "outputs", outputs)
        object.__setattr__(self, "config", np.asarray(self.config, dtype=float))
        if self.role not in ("train", "test"):
            raise InvalidModel(f"dataset role must be train|test, got {self.role!r}")
        if times.ndim != 1 or np.any(np.diff(times) <= 0):
            raise InvalidModel(f"dataset {self.id}: times must be strictly increasing")
        if outputs.shape[0] != times.size:
            raise InvalidModel(f"dataset {self.id}: outputs rows != len(times)")
        if not np.all(np.isfinite(outputs)):
            raise InvalidModel(f"dataset {self.id}: non-finite outputs")


def save_dataset_csv(path: str | Path, times: np.ndarray, outputs: np.ndarray,
                     output_names: Sequence[str]) -> None:
    """Telemetry CSV: header ``t,<name>,...`` then one numeric row per sample."""
    outputs = np.atleast_2d(outputs)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", *output_names])
        for t, row in zip(times, outputs):
            writer.writerow([repr(float(t)), *[repr(float(v)) for v in row]])


def load_dataset_csv(path: str | Path, model: DynamicalModel, config: np.ndarray,
                     dataset_id: str, role: str = "train") -> TimeSeriesDataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader if row]
    if header[0] != "t" or tuple(header[1:]) != model.output_names:
        raise InvalidModel(
            f"{path}: header {header} does not match outputs {('t', *model.output_names)}")
    data = np.asarray(rows, dtype=float)
    return TimeSeriesDataset(id=dataset_id, times=data[:, 0], outputs=data[:, 1:],
                             config=config, role=role)


@dataclass(frozen=True)
class TrainingConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_iters: int = 2000
    patience: int = 200
    seed: int = 0
    # Global-norm gradient clip.  The divergence-penalty region produces
    # gradients ~1e6 that would poison Adam's second moment for thousands of
    # iterations; clipping keeps the moment estimates usable.  0 disables.
    clip_norm: float = 10.0

    def __post_init__(self):
        if self.lr <= 0:
            raise InvalidModel("lr must be > 0")
        if self.max_iters < 1:
            raise InvalidModel("max_iters must be >= 1")


@dataclass
class ExperimentRecord:
    """One training run, kept whole so the engineer can revisit it later."""

    id: str
    spec: nn.MLPSpec
    config: TrainingConfig
    loss_history: list[float]
    final_loss: float
    theta_final: np.ndarray
    wall_time: float
    status: str  # completed | diverged


def train(aug: ude.AugmentedModel, datasets, cfg: TrainingConfig,
          init_theta: Optional[np.ndarray] = None, dt: Optional[float] = None,
          run_id: Optional[str] = None, substeps: int = 1) -> ExperimentRecord:
    """Adam on the adjoint gradient; the returned θ is the best evaluated iterate.

    Each iteration evaluates loss and gradient at the current θ, records the
    loss, then steps; with ``max_iters=1`` the history holds exactly the
    initial evaluation.
    """
    if not datasets:
        raise InvalidModel("need at least one training dataset")
    start = time.perf_counter()
    theta = (np.asarray(init_theta, dtype=float).copy() if init_theta is not None
             else aug.init_weights())
    if theta.shape != (aug.spec.n_params(),):
        raise DimensionMismatch("init_theta does not match the spec layout")

    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    history: list[float] = []
    best_loss = np.inf
    best_theta = theta.copy()
    stale = 0
    for it in range(1, cfg.max_iters + 1):
        res, grad = ude.loss_and_gradient(aug, theta, datasets, dt=dt,
                                          substeps=substeps)
        history.append(res.value)
        if res.value < best_loss:
            best_loss = res.value
            best_theta = theta.copy()
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
        if cfg.clip_norm:
            norm = float(np.linalg.norm(grad))
            if norm > cfg.clip_norm:
                grad = grad * (cfg.clip_norm / norm)
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad * grad
        m_hat = m / (1.0 - cfg.beta1 ** it)
        v_hat = v / (1.0 - cfg.beta2 ** it)
        theta = theta - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)

    status = "diverged" if best_loss >= ude.DIVERGENCE_FLOOR else "completed"
    return ExperimentRecord(
        id=run_id or f"exp-{aug.spec.label()}",
        spec=aug.spec,
        config=cfg,
        loss_history=history,
        final_loss=float(best_loss),
        theta_final=best_theta,
        wall_time=time.perf_counter() - start,
        status=status,
    )


def default_sweep_specs(input_dim: int, output_dim: int,
                        hidden_grid: Sequence[Sequence[int]] = ((8,), (16,), (32,), (16, 16), (32, 32)),
                        activations: Sequence[str] = ("tanh", "softplus"),
                        seeds: Sequence[int] = (0, 1, 2)) -> list[nn.MLPSpec]:
    """The stock 5 architectures x 2 activations x 3 seeds grid."""
    specs = []
    for hidden in hidden_grid:
        for act in activations:
            for seed in seeds:
                specs.append(nn.MLPSpec(input_dim=input_dim, output_dim=output_dim,
                                        hidden=tuple(hidden), activation=act, seed=seed))
    return specs


def _default_trainer(args):
    aug, datasets, cfg, dt, run_id = args
    return train(aug, datasets, cfg, dt=dt, run_id=run_id)


def _run_job(job):
    trainer, args = job
    return trainer(args)


def architecture_sweep(aug: ude.AugmentedModel, datasets, specs: Sequence[nn.MLPSpec],
                       cfg: TrainingConfig, dt: Optional[float] = None,
                       jobs: int = 1,
                       trainer=None) -> tuple[list[ExperimentRecord], ExperimentRecord]:
    """Train every spec independently and pick the best record.

    Ties on final loss break toward fewer parameters, then spec order.  All
    records are returned so a different network can still be chosen later.
    ``trainer`` swaps the per-spec training procedure (must be picklable for
    jobs > 1); it receives ``(spec_aug, datasets, cfg, dt, run_id)``.
    """
    if not specs:
        raise InvalidModel("sweep needs at least one spec")
    for spec in specs:
        if (spec.input_dim, spec.output_dim) != (aug.spec.input_dim, aug.spec.output_dim):
            raise DimensionMismatch("sweep specs must match the augmented model's masks")
    trainer = trainer or _default_trainer
    jobs_args = [(trainer, (dataclasses.replace(aug, spec=spec), datasets, cfg, dt,
                            f"exp-{i:03d}-{spec.label()}"))
                 for i, spec in enumerate(specs)]
    if jobs > 1 and len(specs) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(specs))) as pool:
            records = list(pool.map(_run_job, jobs_args))
    else:
        records = [_run_job(j) for j in jobs_args]
    best = min(records, key=lambda r: (r.final_loss, r.spec.n_params()))
    return records, best


def default_jobs() -> int:
    return max(1, os.cpu_count() or 1)


def sweep_summary_rows(records: Sequence[ExperimentRecord]) -> list[dict]:
    rows = []
    for rec in records:
        rows.append({
            "id": rec.id,
            "hidden": "x".join(str(h) for h in rec.spec.hidden) or "linear",
            "activation": rec.spec.activation,
            "seed": rec.spec.seed,
            "n_params": rec.spec.n_params(),
            "final_loss": rec.final_loss,
            "iterations": len(rec.loss_history),
            "wall_time": rec.wall_time,
            "status": rec.status,
        })
    return rows
