import numpy as np
import pytest

from modeldisc import models
from modeldisc.errors import (AlgebraicSolveFailed, DuplicateName, InvalidModel,
                              NonFiniteState)

from conftest import linear_dae_model, linear_decay_model

# Reference values for the full Lotka-Volterra model at default parameters,
# tabulated by RK4 at dt=1e-5 before the build; a dt=2e-5 run agreed to 8e-14
# (Richardson factor ~16 puts the tabulation error near 5e-15).
LV_REFERENCE = {
    1.0: (0.052450910988241714, 2.772268611549697),
    2.5: (0.03788940737481748, 0.9217085117415719),
    5.0: (0.3572204510396355, 0.2221473868503598),
}


def test_linear_decay_closed_form():
    m = linear_decay_model()
    traj = models.simulate(m, m.default_params(), (0.0, 1.0), 1e-3, [0.0, 1.0])
    assert traj.states[-1, 0] == pytest.approx(np.exp(-1.0), abs=1e-6)


def test_lv_matches_fine_step_reference(lv_full):
    save = sorted(LV_REFERENCE)
    traj = models.simulate(lv_full, lv_full.default_params(), (0.0, 5.0), 1e-3, save)
    for t, row in zip(traj.times, traj.states):
        expected = LV_REFERENCE[t]
        assert row[0] == pytest.approx(expected[0], abs=1e-10)
        assert row[1] == pytest.approx(expected[1], abs=1e-10)


def test_algebraic_state_tracks_constraint():
    m = linear_dae_model()
    traj = models.simulate(m, m.default_params(), (0.0, 1.0), 0.01,
                           np.linspace(0, 1, 11))
    assert np.max(np.abs(traj.states[:, 1] - 2.0 * traj.states[:, 0])) <= 1e-9


def test_algebraic_residual_small_at_every_sample():
    m = linear_dae_model()
    p = m.default_params()
    traj = models.simulate(m, p, (0.0, 2.0), 0.05, np.linspace(0, 2, 21))
    for u, t in zip(traj.states, traj.times):
        g = m.alg_residual(u, np.zeros(0), p, t)
        assert np.max(np.abs(g)) <= 1e-8


def test_rk4_order_on_linear_decay():
    m = linear_decay_model()
    p = m.default_params()
    errors = []
    for dt in (1e-2, 5e-3, 2.5e-3):
        traj = models.simulate(m, p, (0.0, 1.0), dt, [1.0])
        errors.append(abs(traj.states[-1, 0] - np.exp(-1.0)))
    for coarse, fine in zip(errors, errors[1:]):
        assert 14.0 <= coarse / fine <= 18.0


def test_simulation_is_deterministic(lv_full):
    p = lv_full.default_params()
    a = models.simulate(lv_full, p, (0.0, 3.0), 0.01, np.linspace(0, 3, 31))
    b = models.simulate(lv_full, p, (0.0, 3.0), 0.01, np.linspace(0, 3, 31))
    assert a.states.tobytes() == b.states.tobytes()
    assert a.outputs.tobytes() == b.outputs.tobytes()
    assert a.derivatives.tobytes() == b.derivatives.tobytes()


@pytest.mark.parametrize("pair,zeroed", [
    (("lotka_volterra_full", "lotka_volterra_truncated"), {"beta": 0.0, "delta": 0.0}),
    (("two_zone_box_full", "two_zone_box_truncated"), {"k_bulk": 0.0}),
])
def test_truncated_equals_full_with_hidden_term_zeroed(catalog, pair, zeroed):
    full = catalog.get(pair[0])
    trunc = catalog.get(pair[1])
    assert full.state_names == trunc.state_names
    assert full.param_names == trunc.param_names
    assert full.output_names == trunc.output_names
    p = full.params_from(zeroed)
    times = np.linspace(0.0, 3.0, 16)
    a = models.simulate(full, p, (0.0, 3.0), 0.05, times)
    b = models.simulate(trunc, p, (0.0, 3.0), 0.05, times)
    assert a.states.tobytes() == b.states.tobytes()


def test_exogenous_forcing():
    # u' = -u + sin t, u(0) = 0 has solution (sin t - cos t + e^-t) / 2
    m = models.DynamicalModel(
        name="forced", state_names=("u",), state_kinds=("differential",),
        params={"rate": 1.0},
        rhs=lambda u, x, p, t: np.array([-p[0] * u[0] + x[0]]),
        output_map=lambda u, x, p, t: np.array([u[0]]),
        u0_map=lambda p: np.array([0.0]),
        output_names=("u",),
        exogenous=lambda t: np.array([np.sin(t)]),
    )
    traj = models.simulate(m, m.default_params(), (0.0, 2.0), 1e-3, [2.0])
    exact = (np.sin(2.0) - np.cos(2.0) + np.exp(-2.0)) / 2.0
    assert traj.states[-1, 0] == pytest.approx(exact, abs=1e-8)


def test_save_times_split_steps(lv_full):
    # save instants off the dt grid are hit exactly by splitting the step
    p = lv_full.default_params()
    save = [0.0, 0.333, 1.234, 2.0]
    traj = models.simulate(lv_full, p, (0.0, 2.0), 0.05, save)
    assert np.allclose(traj.times, save, atol=1e-12)
    fine = models.simulate(lv_full, p, (0.0, 2.0), 1e-4, save)
    # dt=0.05 RK4 truncation keeps the split-step run within ~1e-6 of fine
    assert np.max(np.abs(traj.states - fine.states)) < 1e-5


@pytest.mark.filterwarnings("ignore:overflow")
def test_nonfinite_state_reports_time():
    blowup = models.DynamicalModel(
        name="blowup", state_names=("u",), state_kinds=("differential",),
        params={"c": 1.0},
        rhs=lambda u, x, p, t: np.array([p[0] * u[0] ** 3]),
        output_map=lambda u, x, p, t: np.array([u[0]]),
        u0_map=lambda p: np.array([3.0]),
        output_names=("u",),
    )
    with pytest.raises(NonFiniteState) as err:
        models.simulate(blowup, blowup.default_params(), (0.0, 5.0), 0.05,
                        [0.0, 5.0])
    assert 0.0 < err.value.time <= 5.0


def test_algebraic_solve_failure_reports_time():
    # g = u_a^2 + 1 has no real root; Newton must give up, not loop forever
    bad = models.DynamicalModel(
        name="bad_dae", state_names=("ud", "ua"),
        state_kinds=("differential", "algebraic"),
        params={"c": 1.0},
        rhs=lambda u, x, p, t: np.array([-u[0]]),
        alg_residual=lambda u, x, p, t: np.array([u[1] ** 2 + 1.0]),
        output_map=lambda u, x, p, t: np.array([u[0]]),
        u0_map=lambda p: np.array([1.0, 0.5]),
        output_names=("ud",),
    )
    with pytest.raises(AlgebraicSolveFailed):
        models.simulate(bad, bad.default_params(), (0.0, 1.0), 0.1, [1.0])


class TestCatalog:
    def test_builtins_registered_sorted(self, catalog):
        assert catalog.names() == [
            "lotka_volterra_full", "lotka_volterra_truncated",
            "two_zone_box_full", "two_zone_box_truncated"]

    def test_register_round_trip(self):
        cat = models.ModelCatalog()
        m = linear_decay_model()
        cat.register(m)
        assert cat.get("decay") is m

    def test_duplicate_name_rejected(self):
        cat = models.ModelCatalog()
        cat.register(linear_decay_model())
        with pytest.raises(DuplicateName):
            cat.register(linear_decay_model())

    def test_initial_state_satisfies_constraints(self, catalog):
        for name in catalog.names():
            m = catalog.get(name)
            p = m.default_params()
            u0 = m.u0_map(p)
            assert np.all(np.isfinite(u0))
            if m.n_alg:
                g = m.alg_residual(u0, m.exogenous_at(0.0), p, 0.0)
                assert np.max(np.abs(g)) <= 1e-8

    def test_higher_index_rejected_at_registration(self):
        # residual independent of the algebraic state: dg/du_a singular
        bad = models.DynamicalModel(
            name="index2", state_names=("ud", "ua"),
            state_kinds=("differential", "algebraic"),
            params={"c": 1.0},
            rhs=lambda u, x, p, t: np.array([-u[0]]),
            alg_residual=lambda u, x, p, t: np.array([u[0] - 1.0]),
            output_map=lambda u, x, p, t: np.array([u[0]]),
            u0_map=lambda p: np.array([1.0, 0.0]),
            output_names=("ud",),
        )
        cat = models.ModelCatalog()
        with pytest.raises(InvalidModel):
            cat.register(bad)

    def test_rhs_length_validated(self):
        wrong = models.DynamicalModel(
            name="wrong", state_names=("a", "b"),
            state_kinds=("differential", "differential"),
            params={"c": 1.0},
            rhs=lambda u, x, p, t: np.array([u[0]]),  # length 1, need 2
            output_map=lambda u, x, p, t: np.array([u[0]]),
            u0_map=lambda p: np.array([1.0, 1.0]),
            output_names=("a",),
        )
        cat = models.ModelCatalog()
        with pytest.raises(InvalidModel):
            cat.register(wrong)
