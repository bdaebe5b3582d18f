import numpy as np
import pytest

from modeldisc import models, nn, training, ude


def linear_decay_model(rate: float = 1.0) -> models.DynamicalModel:
    return models.DynamicalModel(
        name="decay",
        state_names=("u",),
        state_kinds=("differential",),
        params={"rate": rate},
        rhs=lambda u, x, p, t: np.array([-p[0] * u[0]]),
        output_map=lambda u, x, p, t: np.array([u[0]]),
        u0_map=lambda p: np.array([1.0]),
        output_names=("u",),
    )


def linear_dae_model() -> models.DynamicalModel:
    """du/dt = -u + 0.5 u_a with the constraint u_a = 2 u."""
    return models.DynamicalModel(
        name="linear_dae",
        state_names=("ud", "ua"),
        state_kinds=("differential", "algebraic"),
        params={"rate": 1.0},
        rhs=lambda u, x, p, t: np.array([-p[0] * u[0] + 0.5 * u[1]]),
        alg_residual=lambda u, x, p, t: np.array([u[1] - 2.0 * u[0]]),
        output_map=lambda u, x, p, t: np.array([u[0], u[1]]),
        u0_map=lambda p: np.array([1.0, 2.0]),
        output_names=("ud", "ua"),
    )


@pytest.fixture(scope="session")
def catalog():
    return models.builtin_catalog()


@pytest.fixture(scope="session")
def lv_full(catalog):
    return catalog.get("lotka_volterra_full")


@pytest.fixture(scope="session")
def lv_truncated(catalog):
    return catalog.get("lotka_volterra_truncated")


def make_lv_dataset(lv_full, overrides=None, n=21, t_end=2.0, ds_id="lv",
                    role="train", data_dt=1e-3):
    p = lv_full.params_from(overrides or {})
    times = np.linspace(0.0, t_end, n)
    traj = models.simulate(lv_full, p, (0.0, t_end), data_dt, times)
    return training.TimeSeriesDataset(id=ds_id, times=times, outputs=traj.outputs,
                                      config=p, role=role)


def small_lv_aug(lv_truncated, hidden=(4,), seed=0,
                 shift=(0.5, 2.0), scale=(0.5, 1.5), out_scale=(2.0, 3.0)):
    norm = nn.Normalizer(np.array(shift), np.array(scale), np.array(out_scale))
    return ude.build_augmented(lv_truncated, hidden=hidden, seed=seed, normalizer=norm)


def tiny_pipeline_config(seed=42):
    """Small budgets for state-machine tests; structure identical to defaults."""
    from modeldisc import pipeline
    return pipeline.PipelineConfig(
        seed=seed, sweep_hidden=((4,), (8,)), pretrain_iters=300,
        train_iters=40, train_patience=40,
        symreg_population=150, symreg_generations=25)


def write_lv_benchmark(tmp_path, lv_full, n=31, t_end=3.0):
    """Two training configurations and one test configuration as CSVs."""
    from modeldisc import models, training
    from modeldisc.session import DatasetRef

    configs = [
        ("a", "train", {"x0": 0.44249, "y0": 4.628}),
        ("b", "train", {"x0": 0.6, "y0": 3.8}),
        ("c", "test", {"x0": 0.5, "y0": 4.2}),
    ]
    refs = []
    times = np.linspace(0.0, t_end, n)
    for name, role, overrides in configs:
        p = lv_full.params_from(overrides)
        traj = models.simulate(lv_full, p, (0.0, t_end), 1e-3, times)
        path = tmp_path / f"lv_{name}.csv"
        training.save_dataset_csv(path, traj.times, traj.outputs,
                                  lv_full.output_names)
        refs.append(DatasetRef(id=f"lv_{name}", csv_path=str(path), role=role,
                               config=overrides))
    return refs
