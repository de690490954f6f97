import math

import numpy as np
import pytest

from wusnrl.channel import RadioConfig
from wusnrl.data import PathLossTrace
from wusnrl.errors import ConfigurationError, InvalidInputError, UndefinedRatioError
from wusnrl.hmm import GaussianHmm
from wusnrl.mdp import Policy, n_pmax
from wusnrl.simulator import (
    METRIC_COLUMNS, MdpSettings, RLPolicy, SenseThenTransmit, SimMetrics, energy_per_success,
    kind_from_name, metrics_csv, queue_occupancy_report, run, run_power_sweep, run_queue_sweep,
    success_prob_table,
)

RADIO = RadioConfig()


@pytest.fixture(scope="module")
def two_state():
    return GaussianHmm(
        [0.5, 0.5], [[0.95, 0.05], [0.05, 0.95]], [[80.0, 0.0], [100.0, 0.0]], [np.eye(2), np.eye(2)]
    )


@pytest.fixture(scope="module")
def trace():
    pl = np.where((np.arange(3000) // 300) % 2 == 0, 80.0, 100.0)
    pl = pl + np.random.default_rng(0).normal(0, 0.5, size=len(pl))
    return PathLossTrace.from_pl(pl)


def forced(T, p_success):
    return np.full((T, 3), float(p_success))


def full_send_policy(n_channel, n_q, t_max, m=8):
    q = np.arange(n_q + 1)
    n = np.minimum(q + 1, n_pmax(m, t_max))
    return Policy(np.full((n_channel, n_q + 1), m), np.tile(n, (n_channel, 1)))


# ----------------------------------------------------------------- outcomes

def test_certain_success_never_drops(two_state, trace):
    rl = RLPolicy(full_send_policy(2, 20, 2), two_state)
    m = run(trace, rl, RADIO, 20, seed=1, t_max=2, success_probs=forced(len(trace), 1))
    assert m.dropped == 0 and m.successful == len(trace)
    assert m.queue_trace.max() <= n_pmax(8, 2)
    assert m.conserved()


def test_certain_failure_baseline_drops_every_packet(trace):
    m = run(trace, SenseThenTransmit(2), RADIO, 0, seed=1, success_probs=forced(len(trace), 0))
    assert m.dropped == len(trace) and m.successful == 0
    assert m.unsuccessful_attempts == len(trace)


def test_certain_failure_fills_rl_queue(two_state, trace):
    rl = RLPolicy(full_send_policy(2, 30, 1), two_state)
    m = run(trace, rl, RADIO, 30, seed=0, t_max=1, success_probs=forced(len(trace), 0))
    assert m.queue_trace.max() == 30
    assert m.dropped == len(trace) - 30
    assert m.conserved()


def test_conservation_with_initial_queue(two_state, trace):
    rl = RLPolicy(full_send_policy(2, 50, 3), two_state)
    m = run(trace, rl, RADIO.with_power(0.002), 50, seed=4, t_max=3, initial_queue=40)
    assert m.conserved() and m.initial_queue == 40
    assert 0 <= m.queue_trace.min() and m.queue_trace.max() <= 50


def test_run_is_deterministic(two_state, trace):
    rl = RLPolicy(full_send_policy(2, 20, 2), two_state)
    ps = forced(len(trace), 0.6)
    a = run(trace, rl, RADIO, 20, seed=77, t_max=2, success_probs=ps)
    b = run(trace, rl, RADIO, 20, seed=77, t_max=2, success_probs=ps)
    c = run(trace, rl, RADIO, 20, seed=78, t_max=2, success_probs=ps)
    assert a.same_as(b)
    assert not np.array_equal(a.queue_trace, c.queue_trace)


@pytest.mark.parametrize("m", [2, 4, 8])
def test_baseline_equivalence(two_state, trace, m):
    probs = success_prob_table(trace, RADIO.with_power(0.002))
    pol = Policy(np.full((2, 1), m), np.ones((2, 1), dtype=int))
    rl = run(trace, RLPolicy(pol, two_state), RADIO.with_power(0.002), 0, seed=3, success_probs=probs)
    base = run(trace, SenseThenTransmit(m), RADIO.with_power(0.002), 0, seed=3, success_probs=probs)
    for key in ("generated", "successful", "unsuccessful", "dropped", "energy_metric"):
        assert rl.row()[key] == base.row()[key]


def test_success_probabilities_from_path_loss():
    tr = PathLossTrace.from_pl([60.0, 200.0])
    ps = success_prob_table(tr, RADIO)
    assert ps[0].tolist() == [1.0, 1.0, 1.0]
    assert np.all(ps[1] < 1e-300)


def test_viterbi_decoder(two_state, trace):
    rl = RLPolicy(full_send_policy(2, 10, 1), two_state, decode="viterbi")
    states = rl.decoded_states(trace)
    assert set(np.unique(states)) == {0, 1}
    with pytest.raises(ConfigurationError):
        RLPolicy(None, two_state, decode="oracle").decoded_states(trace)


# ----------------------------------------------------------------- errors

def test_dimension_mismatch(two_state, trace):
    rl = RLPolicy(full_send_policy(2, 20, 2), two_state)
    with pytest.raises(ConfigurationError):
        run(trace, rl, RADIO, 30, seed=0)
    with pytest.raises(ConfigurationError):
        run(trace, RLPolicy(full_send_policy(3, 20, 2), two_state), RADIO, 20, seed=0)


def test_empty_trace_rejected(two_state):
    with pytest.raises(InvalidInputError):
        run(PathLossTrace.from_pl([]), SenseThenTransmit(2), RADIO, 0, seed=0)


def test_kind_names():
    assert kind_from_name("RL") is None
    assert [kind_from_name(k) for k in ("bpsk", "qpsk", "8psk")] == [2, 4, 8]
    with pytest.raises(ConfigurationError):
        kind_from_name("16qam")


# ----------------------------------------------------------------- energy

def test_energy_ratio_one_packet_per_period(trace):
    m = run(trace, SenseThenTransmit(4), RADIO, 0, seed=0, success_probs=forced(len(trace), 1))
    assert energy_per_success(m) == pytest.approx(RADIO.t_sym * RADIO.p_t, rel=1e-12)
    doubled = run(trace, SenseThenTransmit(4), RADIO.with_power(0.02), 0, seed=0,
                  success_probs=forced(len(trace), 1))
    assert energy_per_success(doubled) == pytest.approx(2 * energy_per_success(m), rel=1e-12)


def test_physical_energy_accounts_for_symbols(trace):
    m2 = run(trace, SenseThenTransmit(2), RADIO, 0, seed=0, success_probs=forced(len(trace), 1))
    m8 = run(trace, SenseThenTransmit(8), RADIO, 0, seed=0, success_probs=forced(len(trace), 1))
    assert m2.physical_energy == pytest.approx(3 * m8.physical_energy, rel=1e-12)


def test_energy_ratio_undefined_without_success():
    with pytest.raises(UndefinedRatioError):
        energy_per_success(SimMetrics("bpsk", 0.01, 0, 1, generated=5, dropped=5))
    assert math.isnan(SimMetrics("bpsk", 0.01, 0, 1).row()["energy_ratio"])


# ---------------------------------------------------------------- occupancy

def test_occupancy_report():
    assert queue_occupancy_report(SimMetrics("rl", 0.01, 10, 1)) == {"max": 0, "mean": 0.0, "frac_near_full": 0.0}
    m = SimMetrics("rl", 0.01, 10, 1, queue_trace=np.array([0, 5, 9, 10]))
    rep = queue_occupancy_report(m)
    assert rep == {"max": 10, "mean": 6.0, "frac_near_full": 0.5}
    assert queue_occupancy_report(m, [False, False, True, True])["frac_near_full"] == 1.0


# ------------------------------------------------------------------- sweeps

def test_power_sweep_rows_and_seeds(two_state, trace):
    settings = MdpSettings(n_q=20, t_max=2)
    rows = run_power_sweep(trace, ["rl", "bpsk"], [0.002, 0.01], 5, hmm=two_state, settings=settings)
    assert len(rows) == 4
    assert [(p, k) for p, k, _ in rows] == [(0.002, "rl"), (0.002, "bpsk"), (0.01, "rl"), (0.01, "bpsk")]
    # run index 3 uses seed 5 ^ 3
    again = run(trace, SenseThenTransmit(2), RADIO.with_power(0.01), 0, seed=5 ^ 3)
    assert rows[3][2].same_as(again)
    assert all(m.conserved() for _, _, m in rows)


def test_single_power_sweep_equals_run(two_state, trace):
    settings = MdpSettings(n_q=20, t_max=2)
    [(p, k, m)] = run_power_sweep(trace, ["rl"], [0.004], 11, hmm=two_state, settings=settings)
    _, _, pol = settings.solve(two_state, RADIO.with_power(0.004))
    direct = run(trace, RLPolicy(pol, two_state), RADIO.with_power(0.004), 20, seed=11, t_max=2)
    assert m.same_as(direct)


def test_power_sweep_parallel_matches_serial(two_state, trace):
    settings = MdpSettings(n_q=10, t_max=1)
    a = run_power_sweep(trace, ["rl", "8psk"], [0.002, 0.005], 0, hmm=two_state, settings=settings)
    b = run_power_sweep(trace, ["rl", "8psk"], [0.002, 0.005], 0, hmm=two_state, settings=settings, jobs=2)
    assert all(x[2].same_as(y[2]) for x, y in zip(a, b))


def test_power_sweep_rejects_bad_powers(two_state, trace):
    with pytest.raises(InvalidInputError):
        run_power_sweep(trace, ["bpsk"], [], 0, hmm=two_state)
    with pytest.raises(InvalidInputError):
        run_power_sweep(trace, ["bpsk"], [0.01, -1], 0, hmm=two_state)


def test_queue_sweep(two_state, trace):
    out = run_queue_sweep(trace, [5, 12], RADIO, 2, hmm=two_state)
    assert [n for n, _ in out] == [5, 12]
    assert [m.t_max for _, m in out] == [1, 2]
    assert [m.n_q for _, m in out] == [5, 12]
    with pytest.raises(InvalidInputError):
        run_queue_sweep(trace, [0], RADIO, 2, hmm=two_state)


def test_metrics_csv_format(trace):
    m = run(trace, SenseThenTransmit(8), RADIO, 0, seed=0)
    text = metrics_csv([m])
    header, row = text.strip().split("\n")
    assert header.split(",") == METRIC_COLUMNS
    cells = row.split(",")
    assert cells[1] == "8psk"
    assert float(cells[8]) == m.energy_metric
