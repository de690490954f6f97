"""Trace-driven evaluation of the learned policy and sense-then-transmit baselines."""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .channel import MODULATIONS, RadioConfig, ber_mpsk, packet_success_prob, snr
from .data import PathLossTrace
from .errors import ConfigurationError, InvalidInputError, UndefinedRatioError
from .hmm import GaussianHmm, filter_states, viterbi
from .mdp import MdpModel, Policy, build_model, value_iteration

DECODERS = ("filter", "viterbi")
BASELINE_NAMES = {2: "bpsk", 4: "qpsk", 8: "8psk"}
METRIC_COLUMNS = [
    "power_w", "kind", "n_q", "t_max", "generated", "successful", "unsuccessful",
    "dropped", "energy_metric", "energy_ratio", "max_queue",
]


@dataclass
class RLPolicy:
    """Queue-aware policy driven by the HMM-decoded channel state.

    ``decode="filter"`` uses the online filtered posterior (what a deployed
    sensor can compute); ``"viterbi"`` uses the offline MAP path as a
    genie-like reference.
    """

    policy: Policy
    hmm: GaussianHmm
    decode: str = "filter"
    name: str = "rl"
    states: Optional[np.ndarray] = field(default=None, repr=False)

    def decoded_states(self, trace: PathLossTrace) -> np.ndarray:
        if self.states is not None and len(self.states) == len(trace):
            return self.states
        if self.decode not in DECODERS:
            raise ConfigurationError(f"unknown decoder {self.decode!r}")
        obs = trace.observations()
        return filter_states(self.hmm, obs) if self.decode == "filter" else viterbi(self.hmm, obs)


@dataclass(frozen=True)
class SenseThenTransmit:
    """Queueless baseline: send the fresh packet once with a fixed modulation."""

    m: int

    @property
    def name(self) -> str:
        return BASELINE_NAMES[self.m]


PolicyKind = Union[RLPolicy, SenseThenTransmit]


@dataclass(eq=False)
class SimMetrics:
    kind: str
    power_w: float
    n_q: int
    t_max: int
    generated: int = 0
    successful: int = 0
    unsuccessful_attempts: int = 0
    dropped: int = 0
    energy_metric: float = 0.0
    physical_energy: float = 0.0
    initial_queue: int = 0
    final_queue: int = 0
    queue_trace: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    per_period_log: Optional[list] = None

    def conserved(self) -> bool:
        return self.generated + self.initial_queue == self.successful + self.dropped + self.final_queue

    def row(self) -> dict:
        return {
            "power_w": self.power_w,
            "kind": self.kind,
            "n_q": self.n_q,
            "t_max": self.t_max,
            "generated": self.generated,
            "successful": self.successful,
            "unsuccessful": self.unsuccessful_attempts,
            "dropped": self.dropped,
            "energy_metric": self.energy_metric,
            "energy_ratio": self.energy_metric / self.successful if self.successful else math.nan,
            "max_queue": int(self.queue_trace.max()) if len(self.queue_trace) else 0,
        }

    def same_as(self, other: "SimMetrics") -> bool:
        return self.row() == other.row() and np.array_equal(self.queue_trace, other.queue_trace)


def energy_per_success(m: SimMetrics) -> float:
    """Attempt energy t_sym * p_t * (N_t + N_u), summed, per delivered packet."""
    if m.successful <= 0:
        raise UndefinedRatioError("no packet was delivered")
    return m.energy_metric / m.successful


def queue_occupancy_report(m: SimMetrics, mask: Optional[np.ndarray] = None) -> dict:
    """Max, mean and fraction of periods at >= 90% of capacity.

    ``mask`` restricts the statistics to selected periods.
    """
    q = m.queue_trace if mask is None else m.queue_trace[np.asarray(mask, dtype=bool)]
    if len(q) == 0:
        return {"max": 0, "mean": 0.0, "frac_near_full": 0.0}
    near = q >= 0.9 * m.n_q if m.n_q > 0 else np.zeros(len(q), dtype=bool)
    return {"max": int(q.max()), "mean": float(q.mean()), "frac_near_full": float(near.mean())}


def success_prob_table(trace: PathLossTrace, radio: RadioConfig) -> np.ndarray:
    """(T, 3) per-packet success probability for M = 2, 4, 8 at the true path loss."""
    gamma = snr(trace.pl, radio)
    return np.column_stack(
        [packet_success_prob(ber_mpsk(m, gamma), radio.packet_len) for m in MODULATIONS]
    )


def run(
    trace: PathLossTrace,
    kind: PolicyKind,
    radio: RadioConfig,
    queue_cap: int,
    seed: int,
    *,
    t_max: int = 15,
    initial_queue: int = 0,
    log_periods: bool = False,
    success_probs: Optional[np.ndarray] = None,
) -> SimMetrics:
    """Simulate one trace period by period.

    Each period a packet is sensed, the policy picks (M, n), each of the n
    packets independently gets through with probability (1 - P_e)^P_L at the
    period's true path loss, failures go back to the queue (RL) or are lost
    (baselines), and queue overflow drops the oldest packets.
    """
    if len(trace) == 0:
        raise InvalidInputError("empty trace")
    ps = success_probs if success_probs is not None else success_prob_table(trace, radio)
    rng = np.random.default_rng(seed)

    if isinstance(kind, RLPolicy):
        if kind.policy.shape != (kind.hmm.n_states, queue_cap + 1):
            raise ConfigurationError(
                f"policy shape {kind.policy.shape} does not match "
                f"({kind.hmm.n_states} states, queue_cap {queue_cap})"
            )
        states = kind.decoded_states(trace)
        pm, pn = kind.policy.m, kind.policy.n
        cap = queue_cap
        name = kind.name
    elif isinstance(kind, SenseThenTransmit):
        if kind.m not in MODULATIONS:
            raise ConfigurationError(f"bad baseline modulation {kind.m}")
        states = None
        cap = 0
        name = kind.name
    else:
        raise ConfigurationError(f"unknown policy kind {kind!r}")
    if not 0 <= initial_queue <= cap:
        raise ConfigurationError("initial queue outside capacity")

    T = len(trace)
    qtrace = np.empty(T, dtype=np.int64)
    per = [] if log_periods else None
    unit = radio.t_sym * radio.p_t
    q = initial_queue
    succ = fail = drop = attempts = 0
    phys = 0.0
    for t in range(T):
        if states is None:
            m, n = kind.m, 1
        else:
            c = states[t]
            m, n = int(pm[c, q]), int(pn[c, q])
        s = 0
        if n:
            if n > q + 1:
                raise ConfigurationError(f"policy sends {n} packets with only {q + 1} available")
            s = int(np.count_nonzero(rng.random(n) < ps[t, MODULATIONS.index(m)]))
            attempts += n
            phys += n * radio.packet_len / math.log2(m)
        succ += s
        fail += n - s
        q = q + 1 - s
        d = q - cap if q > cap else 0
        q -= d
        drop += d
        qtrace[t] = q
        if per is not None:
            per.append((t, -1 if states is None else int(states[t]), m, n, s, d, q))

    return SimMetrics(
        kind=name, power_w=radio.p_t, n_q=cap, t_max=t_max if isinstance(kind, RLPolicy) else 1,
        generated=T, successful=succ, unsuccessful_attempts=fail, dropped=drop,
        energy_metric=unit * attempts, physical_energy=radio.p_t * radio.t_sym * phys,
        initial_queue=initial_queue, final_queue=q, queue_trace=qtrace, per_period_log=per,
    )


# ------------------------------------------------------------------ sweeps

@dataclass(frozen=True)
class MdpSettings:
    n_q: int = 150
    t_max: int = 15
    alpha1: float = 1.0
    alpha2: float = 0.1
    lam: float = 0.1
    tol: float = 1e-10
    max_iters: int = 1000

    def build(self, h: GaussianHmm, radio: RadioConfig) -> MdpModel:
        return build_model(
            h, radio, alpha1=self.alpha1, alpha2=self.alpha2, lam=self.lam, t_max=self.t_max, n_q=self.n_q
        )

    def solve(self, h: GaussianHmm, radio: RadioConfig):
        model = self.build(h, radio)
        values, policy = value_iteration(model, self.tol, self.max_iters)
        return model, values, policy


def kind_from_name(name: str) -> Optional[int]:
    """Modulation order for a baseline name, None for 'rl'."""
    name = name.lower()
    if name == "rl":
        return None
    for m, label in BASELINE_NAMES.items():
        if name == label:
            return m
    raise ConfigurationError(f"unknown policy kind {name!r}")


def _power_point(args):
    trace, kinds, p, seeds, h, radio, settings, states = args
    r = radio.with_power(p)
    ps = success_prob_table(trace, r)
    out = []
    policy = None
    for name, s in zip(kinds, seeds):
        m = kind_from_name(name)
        if m is None:
            if policy is None:
                _, _, policy = settings.solve(h, r)
            kind = RLPolicy(policy, h, states=states)
            out.append(run(trace, kind, r, settings.n_q, s, t_max=settings.t_max, success_probs=ps))
        else:
            out.append(run(trace, SenseThenTransmit(m), r, 0, s, success_probs=ps))
    return out


def _map(fn, items, jobs):
    if jobs and jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


def run_power_sweep(
    trace: PathLossTrace,
    kinds: Sequence[str],
    powers: Sequence[float],
    seed: int,
    *,
    hmm: GaussianHmm,
    radio: RadioConfig = RadioConfig(),
    settings: MdpSettings = MdpSettings(),
    decode: str = "filter",
    jobs: int = 1,
) -> list[tuple[float, str, SimMetrics]]:
    """One run per (power, kind); the RL policy is re-solved at every power.

    Run i in (power, kind) order uses seed ``seed ^ i``.
    """
    if not powers or any(p <= 0 for p in powers):
        raise InvalidInputError("powers must be non-empty and positive")
    for k in kinds:
        kind_from_name(k)
    states = RLPolicy(None, hmm, decode=decode).decoded_states(trace) if "rl" in kinds else None
    tasks = []
    for i, p in enumerate(powers):
        seeds = [seed ^ (i * len(kinds) + j) for j in range(len(kinds))]
        tasks.append((trace, list(kinds), p, seeds, hmm, radio, settings, states))
    results = _map(_power_point, tasks, jobs)
    return [(p, k, m) for p, ms in zip(powers, results) for k, m in zip(kinds, ms)]


def _queue_point(args):
    trace, n_q, seed, h, radio, settings, states, ps = args
    cfg = MdpSettings(
        n_q=n_q, t_max=math.ceil(0.1 * n_q), alpha1=settings.alpha1, alpha2=settings.alpha2,
        lam=settings.lam, tol=settings.tol, max_iters=settings.max_iters,
    )
    _, _, policy = cfg.solve(h, radio)
    return run(trace, RLPolicy(policy, h, states=states), radio, n_q, seed, t_max=cfg.t_max, success_probs=ps)


def run_queue_sweep(
    trace: PathLossTrace,
    n_q_values: Sequence[int],
    radio: RadioConfig,
    seed: int,
    *,
    hmm: GaussianHmm,
    settings: MdpSettings = MdpSettings(),
    decode: str = "filter",
    jobs: int = 1,
) -> list[tuple[int, SimMetrics]]:
    """RL runs over queue capacities with t_max = ceil(0.1 * N_q), re-solving each point."""
    if not n_q_values or any(n < 1 for n in n_q_values):
        raise InvalidInputError("queue capacities must be >= 1")
    states = RLPolicy(None, hmm, decode=decode).decoded_states(trace)
    ps = success_prob_table(trace, radio)
    tasks = [(trace, n, seed ^ i, hmm, radio, settings, states, ps) for i, n in enumerate(n_q_values)]
    return list(zip(n_q_values, _map(_queue_point, tasks, jobs)))


# ---------------------------------------------------------------------- io

def _cell(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def metrics_csv(metrics: Sequence[SimMetrics]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for m in metrics:
        row = m.row()
        w.writerow([_cell(row[c]) for c in METRIC_COLUMNS])
    return buf.getvalue()
