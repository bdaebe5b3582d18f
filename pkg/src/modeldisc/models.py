"""Semi-explicit dynamical systems and a fixed-step RK4 integrator.

A model couples differential states u_d (advanced by ``rhs``) with optional
algebraic states u_a pinned to the residual ``alg_residual`` at every solver
stage (semi-explicit index-1 only).  The integrator is classic fixed-step
RK4; the fixed computation graph is what later makes the training gradient
an exact derivative of the discrete loss.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import AlgebraicSolveFailed, DuplicateName, InvalidModel, NonFiniteState

ALG_TOL = 1e-10
ALG_MAX_ITER = 25
ALG_MAX_HALVINGS = 8
_JAC_STEP = 1e-7

RhsFn = Callable[[np.ndarray, np.ndarray, np.ndarray, float], np.ndarray]
ExogenousFn = Callable[[float], np.ndarray]


@dataclass(frozen=True)
class DynamicalModel:
    """Semi-explicit system du_d/dt = f(u,x,p,t), 0 = g(u,x,p,t), y = h(u,x,p,t).

    The state vector is ordered differential-first: u = (u_d, u_a).
    ``params`` maps parameter names to default values; ``u0_map`` builds the
    full initial state from a parameter vector.
    """

    name: str
    state_names: tuple[str, ...]
    state_kinds: tuple[str, ...]  # "differential" | "algebraic", diff-first
    params: dict[str, float]
    rhs: RhsFn
    output_map: RhsFn
    u0_map: Callable[[np.ndarray], np.ndarray]
    output_names: tuple[str, ...]
    alg_residual: Optional[RhsFn] = None
    exogenous: Optional[ExogenousFn] = None

    @property
    def n_states(self) -> int:
        return len(self.state_names)

    @property
    def n_diff(self) -> int:
        return sum(1 for k in self.state_kinds if k == "differential")

    @property
    def n_alg(self) -> int:
        return self.n_states - self.n_diff

    @property
    def n_out(self) -> int:
        return len(self.output_names)

    @property
    def param_names(self) -> tuple[str, ...]:
        return tuple(self.params.keys())

    def default_params(self) -> np.ndarray:
        return np.array(list(self.params.values()), dtype=float)

    def params_from(self, overrides: dict[str, float]) -> np.ndarray:
        """Default parameter vector with named overrides applied."""
        unknown = set(overrides) - set(self.params)
        if unknown:
            raise InvalidModel(f"unknown parameters for {self.name}: {sorted(unknown)}")
        merged = dict(self.params)
        merged.update(overrides)
        return np.array([merged[k] for k in self.params], dtype=float)

    def exogenous_at(self, t: float) -> np.ndarray:
        if self.exogenous is None:
            return _EMPTY
        return np.asarray(self.exogenous(t), dtype=float)


_EMPTY = np.zeros(0)


@dataclass(frozen=True)
class Trajectory:
    """Sampled solution: times, full states, outputs and du_d/dt per sample."""

    times: np.ndarray          # (n,)
    states: np.ndarray         # (n, n_states)
    outputs: np.ndarray        # (n, n_out)
    derivatives: np.ndarray    # (n, n_diff)


def _solve_algebraic(model: DynamicalModel, u_d: np.ndarray, u_a0: np.ndarray,
                     x: np.ndarray, p: np.ndarray, t: float) -> np.ndarray:
    """Damped Newton on g for the algebraic part, holding u_d fixed."""
    n_a = model.n_alg
    u_a = u_a0.astype(float).copy()

    def residual(ua):
        return np.asarray(model.alg_residual(np.concatenate([u_d, ua]), x, p, t), dtype=float)

    g = residual(u_a)
    norm = np.max(np.abs(g)) if g.size else 0.0
    for _ in range(ALG_MAX_ITER):
        if not np.all(np.isfinite(g)):
            raise AlgebraicSolveFailed(t, float("inf"))
        if norm <= ALG_TOL:
            return u_a
        jac = np.empty((n_a, n_a))
        for j in range(n_a):
            step = _JAC_STEP * max(1.0, abs(u_a[j]))
            up = u_a.copy()
            up[j] += step
            jac[:, j] = (residual(up) - g) / step
        try:
            delta = np.linalg.solve(jac, -g)
        except np.linalg.LinAlgError as exc:
            raise AlgebraicSolveFailed(t, norm) from exc
        # Halve the step while the residual norm fails to decrease.
        scale = 1.0
        for _ in range(ALG_MAX_HALVINGS + 1):
            trial = u_a + scale * delta
            g_trial = residual(trial)
            trial_norm = np.max(np.abs(g_trial)) if g_trial.size else 0.0
            if np.isfinite(trial_norm) and trial_norm < norm:
                break
            scale *= 0.5
        else:
            raise AlgebraicSolveFailed(t, norm)
        u_a, g, norm = trial, g_trial, trial_norm
    if norm <= ALG_TOL:
        return u_a
    raise AlgebraicSolveFailed(t, norm)


def _merge_grid(t0: float, tf: float, dt: float, save_times: np.ndarray) -> np.ndarray:
    """Step targets: the dt grid split exactly onto every save instant."""
    n_whole = int(np.ceil((tf - t0) / dt - 1e-9))
    grid = t0 + dt * np.arange(1, n_whole + 1)
    grid[-1] = min(grid[-1], tf)
    targets = np.concatenate([grid, save_times, [tf]])
    targets = np.sort(targets[(targets > t0 + 1e-12 * max(1.0, abs(t0)))])
    # collapse targets closer than a relative tolerance (grid hitting a save time)
    keep = [targets[0]]
    for t in targets[1:]:
        if t - keep[-1] > 1e-9 * max(1.0, abs(t)):
            keep.append(t)
    return np.array(keep)


class Rk4Steps:
    """Forward RK4 record: per-step stage states, kept for reverse sweeps."""

    def __init__(self):
        self.t: list[float] = []
        self.h: list[float] = []
        self.stages: list[np.ndarray] = []   # (4, n_states) full stage states
        self.ks: list[np.ndarray] = []       # (4, n_diff) stage derivatives


def rk4_integrate(model: DynamicalModel, deriv: Callable[[np.ndarray, np.ndarray, float], np.ndarray],
                  p: np.ndarray, t_span: tuple[float, float], dt: float,
                  save_times: Optional[Sequence[float]] = None,
                  record: Optional[Rk4Steps] = None) -> Trajectory:
    """Integrate ``deriv(u, x, t) -> du_d/dt`` with fixed-step RK4.

    ``deriv`` sees the full state (algebraic part freshly resolved at every
    stage).  ``record``, when given, captures every stage for an adjoint
    reverse sweep.
    """
    t0, tf = float(t_span[0]), float(t_span[1])
    if dt <= 0:
        raise InvalidModel("dt must be positive")
    if tf <= t0:
        raise InvalidModel("t_span must be increasing")

    n_d, n_a = model.n_diff, model.n_alg
    u0 = np.asarray(model.u0_map(p), dtype=float)
    if u0.shape != (model.n_states,):
        raise InvalidModel(f"u0_map returned shape {u0.shape}, expected ({model.n_states},)")

    if save_times is None:
        save = None
    else:
        save = np.asarray(save_times, dtype=float)
        if save.size and (save[0] < t0 - 1e-9 or save[-1] > tf + 1e-9):
            raise InvalidModel("save_times must lie within t_span")

    def full_state(u_d, u_a_guess, t):
        if n_a == 0:
            return u_d
        x = model.exogenous_at(t)
        u_a = _solve_algebraic(model, u_d, u_a_guess, x, p, t)
        return np.concatenate([u_d, u_a])

    u_d = u0[:n_d].copy()
    u_a = u0[n_d:].copy()
    u = full_state(u_d, u_a, t0)
    if not np.all(np.isfinite(u)):
        raise NonFiniteState(t0)

    targets = _merge_grid(t0, tf, dt, save if save is not None else np.empty(0))
    if save is None:
        save_set = np.concatenate([[t0], targets])
    else:
        save_set = save
    save_idx = 0
    n_save = len(save_set)

    times_out = np.empty(n_save)
    states_out = np.empty((n_save, model.n_states))
    outputs_out = np.empty((n_save, model.n_out))
    derivs_out = np.empty((n_save, n_d))

    def store(t, u):
        nonlocal save_idx
        x = model.exogenous_at(t)
        times_out[save_idx] = t
        states_out[save_idx] = u
        outputs_out[save_idx] = np.asarray(model.output_map(u, x, p, t), dtype=float)
        derivs_out[save_idx] = deriv(u, x, t)
        save_idx += 1

    def is_save(t):
        return save_idx < n_save and abs(save_set[save_idx] - t) <= 1e-9 * max(1.0, abs(t))

    t = t0
    if is_save(t):
        store(t, u)

    for target in targets:
        h = target - t
        x1 = model.exogenous_at(t)
        xm = model.exogenous_at(t + 0.5 * h)
        x4 = model.exogenous_at(target)
        z1 = u
        k1 = deriv(z1, x1, t)
        z2 = full_state(u[:n_d] + 0.5 * h * k1, u[n_d:], t + 0.5 * h)
        k2 = deriv(z2, xm, t + 0.5 * h)
        z3 = full_state(u[:n_d] + 0.5 * h * k2, z2[n_d:], t + 0.5 * h)
        k3 = deriv(z3, xm, t + 0.5 * h)
        z4 = full_state(u[:n_d] + h * k3, z3[n_d:], target)
        k4 = deriv(z4, x4, target)
        u_d_new = u[:n_d] + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(u_d_new)):
            raise NonFiniteState(target)
        u = full_state(u_d_new, z4[n_d:], target)
        if record is not None:
            record.t.append(t)
            record.h.append(h)
            record.stages.append(np.stack([z1, z2, z3, z4]))
            record.ks.append(np.stack([k1, k2, k3, k4]))
        t = target
        if is_save(t):
            store(t, u)

    if save_idx != n_save:
        raise InvalidModel("internal: not every save instant was reached")
    return Trajectory(times=times_out, states=states_out, outputs=outputs_out,
                      derivatives=derivs_out)


def simulate(model: DynamicalModel, p: np.ndarray, t_span: tuple[float, float],
             dt: float, save_times: Optional[Sequence[float]] = None) -> Trajectory:
    """Simulate the bare model (no correction term)."""
    p = np.asarray(p, dtype=float)
    if p.shape != (len(model.params),):
        raise InvalidModel(
            f"parameter vector length {p.shape} does not match {len(model.params)} names")

    def deriv(u, x, t):
        return np.asarray(model.rhs(u, x, p, t), dtype=float)

    return rk4_integrate(model, deriv, p, t_span, dt, save_times)


def validate_model(model: DynamicalModel) -> None:
    """Shape/consistency checks run at registration time."""
    kinds = set(model.state_kinds)
    if not kinds <= {"differential", "algebraic"}:
        raise InvalidModel(f"unknown state kinds {kinds}")
    n_d = model.n_diff
    if any(k == "algebraic" for k in model.state_kinds[:n_d]):
        raise InvalidModel("states must be ordered differential-first")

    p = model.default_params()
    u0 = np.asarray(model.u0_map(p), dtype=float)
    if u0.shape != (model.n_states,):
        raise InvalidModel(f"{model.name}: u0_map shape {u0.shape} != ({model.n_states},)")
    x0 = model.exogenous_at(0.0)
    f0 = np.asarray(model.rhs(u0, x0, p, 0.0), dtype=float)
    if f0.shape != (n_d,):
        raise InvalidModel(f"{model.name}: rhs length {f0.shape} != n_diff {n_d}")
    y0 = np.asarray(model.output_map(u0, x0, p, 0.0), dtype=float)
    if y0.shape != (model.n_out,):
        raise InvalidModel(f"{model.name}: output length {y0.shape} != {model.n_out}")
    if not (np.all(np.isfinite(f0)) and np.all(np.isfinite(y0)) and np.all(np.isfinite(u0))):
        raise InvalidModel(f"{model.name}: non-finite evaluation at the initial state")

    if model.n_alg > 0:
        if model.alg_residual is None:
            raise InvalidModel(f"{model.name}: algebraic states but no alg_residual")
        g0 = np.asarray(model.alg_residual(u0, x0, p, 0.0), dtype=float)
        if g0.shape != (model.n_alg,):
            raise InvalidModel(f"{model.name}: residual length {g0.shape} != n_alg")
        if np.max(np.abs(g0)) > 1e-8:
            raise InvalidModel(
                f"{model.name}: u0 violates the algebraic constraint (|g|={np.max(np.abs(g0)):.2e})")
        # index-1 requirement: dg/du_a invertible at the initial point
        jac = np.empty((model.n_alg, model.n_alg))
        for j in range(model.n_alg):
            up = u0.copy()
            step = _JAC_STEP * max(1.0, abs(up[n_d + j]))
            up[n_d + j] += step
            jac[:, j] = (np.asarray(model.alg_residual(up, x0, p, 0.0)) - g0) / step
        if not np.all(np.isfinite(jac)) or np.linalg.cond(jac) > 1e12:
            raise InvalidModel(f"{model.name}: dg/du_a singular — not semi-explicit index-1")
    elif model.alg_residual is not None:
        raise InvalidModel(f"{model.name}: alg_residual given but no algebraic states")


class ModelCatalog:
    """Name-keyed registry of models; duplicate names are rejected."""

    def __init__(self):
        self._models: dict[str, DynamicalModel] = {}

    def register(self, model: DynamicalModel) -> None:
        if model.name in self._models:
            raise DuplicateName(model.name)
        validate_model(model)
        self._models[model.name] = model

    def get(self, name: str) -> DynamicalModel:
        try:
            return self._models[name]
        except KeyError:
            raise InvalidModel(f"no model named {name!r}; have {self.names()}") from None

    def names(self) -> list[str]:
        return sorted(self._models)

    def __contains__(self, name: str) -> bool:
        return name in self._models


# ---------------------------------------------------------------------------
# Built-in models.  Plain functions (not closures) so models pickle across
# worker processes.

def _lv_full_rhs(u, x, p, t):
    prey, pred = u[0], u[1]
    return np.array([p[0] * prey - p[1] * prey * pred,
                     -p[2] * pred + p[3] * prey * pred])


def _lv_truncated_rhs(u, x, p, t):
    return np.array([p[0] * u[0], -p[2] * u[1]])


def _lv_output(u, x, p, t):
    return np.array([u[0], u[1]])


def _lv_u0(p):
    return np.array([p[4], p[5]])


_LV_PARAMS = {"alpha": 1.3, "beta": 0.9, "gamma": 0.8, "delta": 1.8,
              "x0": 0.44249, "y0": 4.6280}


def lotka_volterra_full() -> DynamicalModel:
    return DynamicalModel(
        name="lotka_volterra_full",
        state_names=("x", "y"),
        state_kinds=("differential", "differential"),
        params=dict(_LV_PARAMS),
        rhs=_lv_full_rhs,
        output_map=_lv_output,
        u0_map=_lv_u0,
        output_names=("x", "y"),
    )


def lotka_volterra_truncated() -> DynamicalModel:
    """Lotka–Volterra with both interaction terms removed."""
    return DynamicalModel(
        name="lotka_volterra_truncated",
        state_names=("x", "y"),
        state_kinds=("differential", "differential"),
        params=dict(_LV_PARAMS),
        rhs=_lv_truncated_rhs,
        output_map=_lv_output,
        u0_map=_lv_u0,
        output_names=("x", "y"),
    )


# Two lumped air zones behind two-layer walls; the bulkhead conducts heat
# between the zones proportionally to their temperature difference.  Air heat
# capacity scales with zone length, wall dynamics are per unit length.
_TZ_PARAMS = {
    "L1": 9.0, "L2": 4.5,           # zone lengths (m)
    "T1_0": -20.0, "T2_0": 0.0,     # initial air temperatures (degC)
    "T_amb": 30.0,                  # ambient temperature (degC)
    "h_wall": 0.2,                  # air <-> inner wall conductance (W/K/m)
    "g_wall": 0.1,                  # inner <-> outer wall conductance (W/K/m)
    "h_amb": 0.05,                  # outer wall <-> ambient conductance (W/K/m)
    "c_air": 1.0,                   # air heat capacity per length (J/K/m)
    "c_wall": 5.0,                  # wall layer heat capacity per length (J/K/m)
    "k_bulk": 0.3,                  # bulkhead coupling coefficient (W/K)
}


def _tz_unpack(p):
    return dict(zip(_TZ_PARAMS.keys(), p))


def _tz_wall_rates(u, q):
    t1, t2, w1i, w1o, w2i, w2o = u[:6]
    dw1i = (q["g_wall"] * (w1o - w1i) + q["h_wall"] * (t1 - w1i)) / q["c_wall"]
    dw1o = (q["h_amb"] * (q["T_amb"] - w1o) + q["g_wall"] * (w1i - w1o)) / q["c_wall"]
    dw2i = (q["g_wall"] * (w2o - w2i) + q["h_wall"] * (t2 - w2i)) / q["c_wall"]
    dw2o = (q["h_amb"] * (q["T_amb"] - w2o) + q["g_wall"] * (w2i - w2o)) / q["c_wall"]
    return dw1i, dw1o, dw2i, dw2o


def _tz_full_rhs(u, x, p, t):
    q = _tz_unpack(p)
    t1, t2, w1i, _, w2i, _ = u[:6]
    dt1 = (q["h_wall"] * (w1i - t1) + q["k_bulk"] * (t2 - t1) / q["L1"]) / q["c_air"]
    dt2 = (q["h_wall"] * (w2i - t2) + q["k_bulk"] * (t1 - t2) / q["L2"]) / q["c_air"]
    return np.array([dt1, dt2, *_tz_wall_rates(u, q)])


def _tz_truncated_rhs(u, x, p, t):
    q = _tz_unpack(p)
    t1, t2, w1i, _, w2i, _ = u[:6]
    dt1 = (q["h_wall"] * (w1i - t1)) / q["c_air"]
    dt2 = (q["h_wall"] * (w2i - t2)) / q["c_air"]
    return np.array([dt1, dt2, *_tz_wall_rates(u, q)])


def _tz_output(u, x, p, t):
    return np.array([u[0], u[1]])


def _tz_u0(p):
    q = _tz_unpack(p)
    t1, t2, amb = q["T1_0"], q["T2_0"], q["T_amb"]
    return np.array([
        t1, t2,
        t1 + (amb - t1) / 3.0, t1 + 2.0 * (amb - t1) / 3.0,
        t2 + (amb - t2) / 3.0, t2 + 2.0 * (amb - t2) / 3.0,
    ])


_TZ_STATES = ("T1", "T2", "W1_inner", "W1_outer", "W2_inner", "W2_outer")


def two_zone_box_full() -> DynamicalModel:
    return DynamicalModel(
        name="two_zone_box_full",
        state_names=_TZ_STATES,
        state_kinds=("differential",) * 6,
        params=dict(_TZ_PARAMS),
        rhs=_tz_full_rhs,
        output_map=_tz_output,
        u0_map=_tz_u0,
        output_names=("T1", "T2"),
    )


def two_zone_box_truncated() -> DynamicalModel:
    """Two-zone box with the bulkhead coupling removed."""
    return DynamicalModel(
        name="two_zone_box_truncated",
        state_names=_TZ_STATES,
        state_kinds=("differential",) * 6,
        params=dict(_TZ_PARAMS),
        rhs=_tz_truncated_rhs,
        output_map=_tz_output,
        u0_map=_tz_u0,
        output_names=("T1", "T2"),
    )


def builtin_catalog() -> ModelCatalog:
    catalog = ModelCatalog()
    for ctor in (lotka_volterra_full, lotka_volterra_truncated,
                 two_zone_box_full, two_zone_box_truncated):
        catalog.register(ctor())
    return catalog
