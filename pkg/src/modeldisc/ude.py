"""Neural-corrected dynamics: augmented simulation, data-fit loss, adjoint gradient.

The correction enters the differential equations additively,

    du_d/dt = f(u, x, p, t) + S_out · diag(output_scale) · NN(norm(select(u)); θ)

where ``select`` applies the input mask over the full state and ``S_out``
scatters the network outputs onto the masked equations.  The gradient of the
loss is the exact derivative of the discrete RK4 loss: a reverse sweep over
every recorded stage, with analytic vector-Jacobian products for the network
and central finite differences (step 1e-6) for the closed-form model
functions, which are not self-differentiating.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import nn
from .errors import AlgebraicSolveFailed, DimensionMismatch, NonFiniteState
from .models import DynamicalModel, Rk4Steps, Trajectory, _solve_algebraic, rk4_integrate

FD_STEP = 1e-6
DIVERGENCE_FLOOR = 1e6


@dataclass(frozen=True)
class AugmentedModel:
    """A base model plus a masked, normalized neural correction term."""

    base: DynamicalModel
    spec: nn.MLPSpec
    normalizer: nn.Normalizer
    input_mask: np.ndarray    # bool over full state vector
    output_mask: np.ndarray   # bool over differential equations

    def __post_init__(self):
        im = np.asarray(self.input_mask, dtype=bool)
        om = np.asarray(self.output_mask, dtype=bool)
        object.__setattr__(self, "input_mask", im)
        object.__setattr__(self, "output_mask", om)
        if im.shape != (self.base.n_states,):
            raise DimensionMismatch("input_mask must cover every state")
        if om.shape != (self.base.n_diff,):
            raise DimensionMismatch("output_mask must cover every differential equation")
        if om.any():
            if self.spec.input_dim != int(im.sum()):
                raise DimensionMismatch(
                    f"spec.input_dim {self.spec.input_dim} != selected inputs {int(im.sum())}")
            if self.spec.output_dim != int(om.sum()):
                raise DimensionMismatch(
                    f"spec.output_dim {self.spec.output_dim} != selected outputs {int(om.sum())}")

    @property
    def input_indices(self) -> np.ndarray:
        return np.flatnonzero(self.input_mask)

    @property
    def output_indices(self) -> np.ndarray:
        return np.flatnonzero(self.output_mask)

    def init_weights(self) -> np.ndarray:
        return nn.init_weights(self.spec)


def build_augmented(base: DynamicalModel, hidden: Sequence[int] = (16,),
                    activation: str = "tanh", seed: int = 0,
                    input_mask: Optional[np.ndarray] = None,
                    output_mask: Optional[np.ndarray] = None,
                    normalizer: Optional[nn.Normalizer] = None) -> AugmentedModel:
    """Augmented model with all-state inputs and all-equation outputs by default."""
    im = np.ones(base.n_states, dtype=bool) if input_mask is None \
        else np.asarray(input_mask, dtype=bool)
    om = np.ones(base.n_diff, dtype=bool) if output_mask is None \
        else np.asarray(output_mask, dtype=bool)
    spec = nn.MLPSpec(input_dim=max(int(im.sum()), 1), output_dim=max(int(om.sum()), 1),
                      hidden=tuple(hidden), activation=activation, seed=seed)
    norm = normalizer if normalizer is not None \
        else nn.Normalizer.identity(spec.input_dim, spec.output_dim)
    return AugmentedModel(base=base, spec=spec, normalizer=norm,
                          input_mask=im, output_mask=om)


def correction(aug: AugmentedModel, theta: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Scaled network correction scattered over all differential equations."""
    corr = np.zeros(aug.base.n_diff)
    if not aug.output_mask.any():
        return corr
    z = aug.normalizer.normalize(u[aug.input_indices])
    out = nn.forward(aug.spec, theta, z)
    corr[aug.output_indices] = aug.normalizer.output_scale * out
    return corr


def augmented_deriv(aug: AugmentedModel, theta: np.ndarray, u: np.ndarray,
                    x: np.ndarray, p: np.ndarray, t: float) -> np.ndarray:
    """Base rhs plus the scattered scaled network output at one point."""
    du = np.asarray(aug.base.rhs(u, x, p, t), dtype=float)
    if aug.output_mask.any():
        z = aug.normalizer.normalize(u[aug.input_indices])
        out = nn.forward(aug.spec, theta, z)
        du = du.copy()
        du[aug.output_indices] += aug.normalizer.output_scale * out
    return du


def grid_dt(times: np.ndarray) -> float:
    return float(np.median(np.diff(np.asarray(times, dtype=float))))


def simulate_augmented(aug: AugmentedModel, theta: np.ndarray, p: np.ndarray,
                       save_times: Sequence[float], dt: Optional[float] = None,
                       record: Optional[Rk4Steps] = None,
                       substeps: int = 1) -> Trajectory:
    """RK4 on the corrected dynamics, saving on the dataset grid.

    ``dt`` defaults to the grid's median spacing divided by ``substeps``.
    """
    save = np.asarray(save_times, dtype=float)
    if dt is None:
        dt = grid_dt(save) / max(1, substeps)
    p = np.asarray(p, dtype=float)
    base = aug.base
    active = bool(aug.output_mask.any())
    out_idx = aug.output_indices
    in_idx = aug.input_indices
    norm = aug.normalizer

    def deriv(u, x, t):
        du = np.asarray(base.rhs(u, x, p, t), dtype=float)
        if active:
            out = nn.forward(aug.spec, theta, norm.normalize(u[in_idx]))
            du = du.copy()
            du[out_idx] += norm.output_scale * out
        return du

    return rk4_integrate(base, deriv, p, (save[0], save[-1]), dt, save, record=record)


@dataclass(frozen=True)
class Residual:
    """Scalar data-fit loss with its per-channel decomposition."""

    value: float
    per_output: np.ndarray
    n_points: int


def _channel_std(outputs: np.ndarray) -> np.ndarray:
    return np.maximum(outputs.std(axis=0), 1e-8)


def _divergence_value(times: np.ndarray, t_fail: float) -> float:
    # Finite, and smaller the longer the simulation survives, so optimizers
    # are steered toward (then past) the stability boundary.
    return DIVERGENCE_FLOOR + max(0.0, float(times[-1]) - t_fail)


def loss(aug: AugmentedModel, theta: np.ndarray, datasets,
         dt: Optional[float] = None, substeps: int = 1) -> Residual:
    """Mean over datasets of the per-channel-σ-normalized mean squared error."""
    values = []
    per_out = []
    n_points = 0
    for ds in datasets:
        sigma = _channel_std(ds.outputs)
        try:
            traj = simulate_augmented(aug, theta, ds.config, ds.times, dt=dt,
                                      substeps=substeps)
        except (NonFiniteState, AlgebraicSolveFailed) as failure:
            penalty = _divergence_value(ds.times, failure.time)
            values.append(penalty)
            per_out.append(np.full(ds.outputs.shape[1], penalty))
            continue
        scaled = (traj.outputs - ds.outputs) / sigma
        sq = scaled * scaled
        values.append(float(sq.mean()))
        per_out.append(sq.mean(axis=0))
        n_points += len(ds.times)
    value = float(np.mean(values))
    return Residual(value=value, per_output=np.mean(per_out, axis=0), n_points=n_points)


def _fd_rows(fn, u, n_diff, resolve, step=FD_STEP):
    """Central-difference derivative of ``fn(full_state)`` along each diff state.

    ``resolve`` recomputes the algebraic part after a perturbation (identity
    for pure ODEs).  Returns a (n_diff, len(fn)) matrix of directional
    derivatives.
    """
    rows = []
    for j in range(n_diff):
        up = u.copy()
        up[j] += step
        um = u.copy()
        um[j] -= step
        rows.append((fn(resolve(up)) - fn(resolve(um))) / (2.0 * step))
    return np.asarray(rows)


def loss_gradient(aug: AugmentedModel, theta: np.ndarray, datasets,
                  dt: Optional[float] = None, substeps: int = 1) -> np.ndarray:
    """Exact gradient of the discrete loss via a reverse sweep over RK4 stages."""
    return loss_and_gradient(aug, theta, datasets, dt=dt, substeps=substeps)[1]


def loss_and_gradient(aug: AugmentedModel, theta: np.ndarray, datasets,
                      dt: Optional[float] = None,
                      substeps: int = 1) -> tuple[Residual, np.ndarray]:
    """Loss and its θ-gradient from a single forward pass per dataset."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (aug.spec.n_params(),):
        raise DimensionMismatch(
            f"theta length {theta.shape} != {aug.spec.n_params()}")
    grad = np.zeros_like(theta)
    corrected = bool(aug.output_mask.any())
    n_datasets = len(datasets)
    values, per_out, n_points = [], [], 0
    for ds in datasets:
        sigma = _channel_std(ds.outputs)
        record = Rk4Steps()
        try:
            traj = simulate_augmented(aug, theta, ds.config, ds.times, dt=dt,
                                      record=record, substeps=substeps)
        except (NonFiniteState, AlgebraicSolveFailed) as failure:
            penalty = _divergence_value(ds.times, failure.time)
            values.append(penalty)
            per_out.append(np.full(ds.outputs.shape[1], penalty))
            continue  # diverged: contributes no gradient
        scaled = (traj.outputs - ds.outputs) / sigma
        sq = scaled * scaled
        values.append(float(sq.mean()))
        per_out.append(sq.mean(axis=0))
        n_points += len(ds.times)
        if corrected:
            grad += _dataset_gradient(aug, theta, ds, traj, record, n_datasets)
    res = Residual(value=float(np.mean(values)),
                   per_output=np.mean(per_out, axis=0), n_points=n_points)
    return res, grad


def _dataset_gradient(aug, theta, ds, traj, record, n_datasets):
    base = aug.base
    p = np.asarray(ds.config, dtype=float)
    n_d, n_a = base.n_diff, base.n_alg
    in_idx, out_idx = aug.input_indices, aug.output_indices
    norm = aug.normalizer
    layers = nn.unflatten(aug.spec, theta)
    in_is_diff = in_idx < n_d
    in_diff_targets = in_idx[in_is_diff]
    inv_scale_diff = 1.0 / norm.input_scale[in_is_diff]
    sigma = _channel_std(ds.outputs)
    n_samples, n_ch = ds.outputs.shape
    # d(loss)/d(yhat) for value = mean_d mean_{i,c} ((yhat-y)/sigma)^2
    weight = 2.0 / (n_datasets * n_samples * n_ch)
    out_cots = weight * (traj.outputs - ds.outputs) / (sigma * sigma)

    def resolver(t):
        if n_a == 0:
            return lambda u: u
        x = base.exogenous_at(t)

        def resolve(u):
            ua = _solve_algebraic(base, u[:n_d], u[n_d:], x, p, t)
            return np.concatenate([u[:n_d], ua])

        return resolve

    def state_cotangent(u, t, w):
        """(∂h/∂u_d)ᵀ w with the algebraic part re-resolved, by central FD."""
        x = base.exogenous_at(t)
        rows = _fd_rows(lambda z: np.asarray(base.output_map(z, x, p, t), dtype=float),
                        u, n_d, resolver(t))
        return rows @ w

    def stage_vjp(z, t, a):
        """λ_u = (∂k/∂u_d)ᵀ a at a stage state, and the θ-gradient contribution."""
        x = base.exogenous_at(t)
        resolve = resolver(t)
        rows_f = _fd_rows(lambda zz: np.asarray(base.rhs(zz, x, p, t), dtype=float),
                          z, n_d, resolve)
        lam = rows_f @ a
        cot_nn = a[out_idx] * norm.output_scale
        z_in = norm.normalize(z[in_idx])
        g_theta, g_in = nn.vjp_layers(aug.spec, layers, z_in, cot_nn)
        if n_a == 0:
            # normalize∘select is linear in u_d: chain rule is a scatter-scale
            lam_nn = np.zeros(n_d)
            lam_nn[in_diff_targets] = g_in[in_is_diff] * inv_scale_diff
            lam = lam + lam_nn
        else:
            rows_in = _fd_rows(lambda zz: norm.normalize(zz[in_idx]), z, n_d, resolve)
            lam = lam + rows_in @ g_in
        return lam, g_theta

    grad = np.zeros_like(theta)
    # map save instants onto step boundaries (saves align with step targets)
    save_times = traj.times
    n_steps = len(record.t)
    step_end_times = [record.t[i] + record.h[i] for i in range(n_steps)]
    save_ptr = n_samples - 1

    lam = np.zeros(n_d)
    # terminal save(s) at the final time
    while save_ptr >= 0 and abs(save_times[save_ptr] - step_end_times[-1]) <= 1e-9 * max(1.0, abs(step_end_times[-1])):
        lam += state_cotangent(traj.states[save_ptr], save_times[save_ptr],
                               out_cots[save_ptr])
        save_ptr -= 1

    for i in range(n_steps - 1, -1, -1):
        t, h = record.t[i], record.h[i]
        z1, z2, z3, z4 = record.stages[i]
        a4 = (h / 6.0) * lam
        w4, g4 = stage_vjp(z4, t + h, a4)
        a3 = (h / 3.0) * lam + h * w4
        w3, g3 = stage_vjp(z3, t + 0.5 * h, a3)
        a2 = (h / 3.0) * lam + 0.5 * h * w3
        w2, g2 = stage_vjp(z2, t + 0.5 * h, a2)
        a1 = (h / 6.0) * lam + 0.5 * h * w2
        w1, g1 = stage_vjp(z1, t, a1)
        lam = lam + w1 + w2 + w3 + w4
        grad += g1 + g2 + g3 + g4
        # inject the loss cotangent for a save instant at this step's start
        while save_ptr >= 0 and abs(save_times[save_ptr] - t) <= 1e-9 * max(1.0, abs(t)):
            lam += state_cotangent(traj.states[save_ptr], save_times[save_ptr],
                                   out_cots[save_ptr])
            save_ptr -= 1
    return grad
