"""Joint (channel state, queue length) MDP and its value-iteration solver.

Rewards carry a common factor 1/(t_sym * p_t). The solver works on rewards
with that factor removed (units of bits per transmission attempt) and in
extended precision, so convergence tolerances stay meaningful even when the
physical values are of order 1e8. :class:`ValueTable` reports both scales.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np
from scipy.stats import binom

from .channel import MODULATIONS, RadioConfig, ber_mpsk, packet_fail_prob, snr
from .errors import ContractViolation, ConvergenceError, InvalidInputError
from .hmm import GaussianHmm

log = logging.getLogger(__name__)

POLICY_FORMAT = "wusnrl.policy"
POLICY_VERSION = 1


@dataclass(frozen=True, order=True)
class Action:
    m: int
    n: int

    @property
    def bits_per_symbol(self) -> int:
        return int(math.log2(self.m))


def n_pmax(m: int, t_max: int) -> int:
    """Packets that fit into the slot budget with M-PSK."""
    return t_max * int(math.log2(m))


def all_actions(t_max: int) -> list[Action]:
    """Every action for any queue length, ordered by (m, n)."""
    return [Action(m, n) for m in MODULATIONS for n in range(n_pmax(m, t_max) + 1)]


def feasible_actions(q1: int, t_max: int) -> list[Action]:
    """Actions available with ``q1`` queued packets plus the newly sensed one."""
    if q1 < 0:
        raise InvalidInputError("queue length must be non-negative")
    return [a for a in all_actions(t_max) if a.n <= q1 + 1]


def _check_feasible(q1: int, a: Action, t_max: int) -> None:
    if a.m not in MODULATIONS or a.n < 0 or a.n > min(q1 + 1, n_pmax(a.m, t_max)):
        raise ContractViolation(f"action {a} is not feasible with q1={q1}, t_max={t_max}")


def queue_transition(q1: int, a: Action, pe: float, *, n_q: int, t_max: int, packet_len: int) -> np.ndarray:
    """Distribution of the next queue length, indexed 0..n_q.

    Failed packets stay queued; anything above ``n_q`` is dropped, so the
    overflow mass collapses onto ``n_q``.
    """
    if not 0 <= q1 <= n_q:
        raise ContractViolation(f"q1={q1} outside 0..{n_q}")
    _check_feasible(q1, a, t_max)
    out = np.zeros(n_q + 1)
    p_fail = packet_fail_prob(pe, packet_len)
    k = np.arange(a.n + 1)
    pmf = binom.pmf(k, a.n, p_fail)
    np.add.at(out, np.minimum(q1 + 1 - a.n + k, n_q), pmf)
    return out


def _reward_per_unit(q1, n, m, p_fail, alpha1, alpha2):
    """Expected reward times t_sym * p_t; vectorised over any argument."""
    q1 = np.asarray(q1, dtype=float)
    n = np.asarray(n, dtype=float)
    ok = n.astype(float) > 0
    nn = np.where(ok, n, 1.0)
    e_fail = nn * p_fail
    e_succ = nn - e_fail
    num = (e_succ - alpha1 * e_fail - alpha2 * (q1 - e_succ + 1)) * np.log2(m)
    return np.where(ok, num / nn, 0.0)


def expected_reward(
    q1: int, a: Action, pe: float, *, alpha1: float, alpha2: float, t_sym: float, p_t: float, packet_len: int
) -> float:
    """Mean immediate reward over the binomial number of failed packets.

    The numerator is affine in the failure count, so its expectation is exact.
    Zero when nothing is sent.
    """
    p_fail = packet_fail_prob(pe, packet_len)
    return float(_reward_per_unit(q1, a.n, a.m, p_fail, alpha1, alpha2)) / (t_sym * p_t)


@dataclass(eq=False)
class MdpModel:
    channel_trans: np.ndarray
    pe_table: np.ndarray  # (n_channel, 3) BER for M = 2, 4, 8
    n_q: int = 150
    t_max: int = 15
    alpha1: float = 1.0
    alpha2: float = 0.1
    t_sym: float = 1 / 60000
    p_t: float = 0.01
    packet_len: int = 1000
    lam: float = 0.1
    state_pl: Optional[np.ndarray] = None

    def __post_init__(self):
        self.channel_trans = np.asarray(self.channel_trans, dtype=float)
        self.pe_table = np.asarray(self.pe_table, dtype=float).reshape(-1, len(MODULATIONS))
        c = len(self.pe_table)
        if self.channel_trans.shape != (c, c):
            raise InvalidInputError("channel_trans and pe_table disagree on the state count")
        if np.any(np.abs(self.channel_trans.sum(axis=1) - 1) > 1e-9) or np.any(self.channel_trans < 0):
            raise InvalidInputError("channel_trans must be row-stochastic")
        if np.any((self.pe_table < 0) | (self.pe_table > 1)):
            raise InvalidInputError("pe_table entries must lie in [0, 1]")
        if not 0 <= self.lam < 1:
            raise InvalidInputError("discount must lie in [0, 1)")
        if self.n_q < 0 or self.t_max < 1:
            raise InvalidInputError("need n_q >= 0 and t_max >= 1")

    @property
    def n_channel(self) -> int:
        return len(self.pe_table)

    @property
    def reward_scale(self) -> float:
        return 1.0 / (self.t_sym * self.p_t)

    @cached_property
    def actions(self) -> list[Action]:
        return all_actions(self.t_max)

    def pe(self, c: int, m: int) -> float:
        return float(self.pe_table[c, MODULATIONS.index(m)])

    def p_fail_table(self) -> np.ndarray:
        return packet_fail_prob(self.pe_table, self.packet_len)

    def params(self) -> dict:
        return {
            "n_q": self.n_q, "t_max": self.t_max, "alpha1": self.alpha1, "alpha2": self.alpha2,
            "t_sym": self.t_sym, "p_t": self.p_t, "packet_len": self.packet_len, "lam": self.lam,
            "channel_trans": self.channel_trans.ravel().tolist(),
            "pe_table": self.pe_table.ravel().tolist(),
            "state_pl": None if self.state_pl is None else np.asarray(self.state_pl).tolist(),
        }

    @classmethod
    def from_params(cls, d: dict) -> "MdpModel":
        c = int(round(math.sqrt(len(d["channel_trans"]))))
        return cls(
            np.array(d["channel_trans"]).reshape(c, c), np.array(d["pe_table"]).reshape(c, 3),
            n_q=d["n_q"], t_max=d["t_max"], alpha1=d["alpha1"], alpha2=d["alpha2"], t_sym=d["t_sym"],
            p_t=d["p_t"], packet_len=d["packet_len"], lam=d["lam"],
            state_pl=None if d.get("state_pl") is None else np.array(d["state_pl"]),
        )


def build_model(
    h: GaussianHmm,
    radio: RadioConfig,
    *,
    alpha1: float = 1.0,
    alpha2: float = 0.1,
    lam: float = 0.1,
    t_max: int = 15,
    n_q: int = 150,
) -> MdpModel:
    """MDP whose per-state BER is evaluated at each HMM state's mean path loss."""
    state_pl = h.means[:, 0].copy()
    gamma = snr(state_pl, radio)
    pe = np.column_stack([ber_mpsk(m, gamma) for m in MODULATIONS])
    return MdpModel(
        h.trans.copy(), pe, n_q=n_q, t_max=t_max, alpha1=alpha1, alpha2=alpha2,
        t_sym=radio.t_sym, p_t=radio.p_t, packet_len=radio.packet_len, lam=lam, state_pl=state_pl,
    )


@dataclass(eq=False)
class Policy:
    m: np.ndarray  # (n_channel, n_q + 1) modulation order
    n: np.ndarray  # (n_channel, n_q + 1) packets to send

    @property
    def shape(self) -> tuple[int, int]:
        return self.m.shape

    def same_as(self, other: "Policy") -> bool:
        return np.array_equal(self.m, other.m) and np.array_equal(self.n, other.n)


@dataclass(eq=False)
class ValueTable:
    """Optimal values.

    ``v_units`` is in reward units without the 1/(t_sym p_t) factor;
    ``v = v_units * scale`` is the value in the reward's own units.
    ``residuals`` are the sup-norm changes of ``v_units`` per sweep.
    """

    v_units: np.ndarray
    scale: float
    residuals: list = field(default_factory=list)

    @property
    def v(self) -> np.ndarray:
        return self.v_units * self.scale

    @property
    def sweeps(self) -> int:
        return len(self.residuals)


def policy_lookup(p: Policy, c: int, q1: int) -> Action:
    rows, cols = p.shape
    if not (0 <= c < rows and 0 <= q1 < cols):
        raise ContractViolation(f"(c={c}, q1={q1}) outside policy of shape {p.shape}")
    return Action(int(p.m[c, q1]), int(p.n[c, q1]))


class _Bellman:
    """Precomputed tables for repeated Bellman sweeps on one model."""

    def __init__(self, model: MdpModel, dtype=np.longdouble):
        self.model = model
        self.dtype = dtype
        nq1 = model.n_q + 1
        q = np.arange(nq1)
        pf = model.p_fail_table()
        self.P = model.channel_trans.astype(dtype)
        self.terms = []
        for a in model.actions:
            mi = MODULATIONS.index(a.m)
            qs = q[q + 1 >= a.n]
            k = np.arange(a.n + 1)
            pmf = binom.pmf(k[None, :], a.n, pf[:, mi][:, None]).astype(dtype)  # (C, n+1)
            idx = np.minimum(qs[:, None] + 1 - a.n + k[None, :], model.n_q)  # (|qs|, n+1)
            r = _reward_per_unit(qs[None, :], a.n, a.m, pf[:, mi][:, None], model.alpha1, model.alpha2)
            self.terms.append((qs, idx, pmf, np.asarray(r, dtype=dtype)))

    def q_values(self, v: np.ndarray) -> np.ndarray:
        """(C, n_q+1, A) action values, -inf where infeasible."""
        m = self.model
        w = self.P @ v  # expected next value over the channel, indexed by next queue
        out = np.full((m.n_channel, m.n_q + 1, len(self.terms)), -np.inf, dtype=self.dtype)
        for j, (qs, idx, pmf, r) in enumerate(self.terms):
            cont = np.einsum("cqk,ck->cq", w[:, idx], pmf)
            out[:, qs, j] = r + m.lam * cont
        return out

    def greedy(self, qv: np.ndarray) -> tuple[np.ndarray, Policy]:
        best = np.argmax(qv, axis=2)  # first maximum: lowest m, then lowest n
        v = np.take_along_axis(qv, best[..., None], axis=2)[..., 0]
        acts = self.model.actions
        ms = np.array([a.m for a in acts])[best]
        ns = np.array([a.n for a in acts])[best]
        return v, Policy(ms, ns)


def value_iteration(model: MdpModel, tol: float = 1e-10, max_iters: int = 1000) -> tuple[ValueTable, Policy]:
    """Solve the MDP by synchronous value iteration from V = 0.

    Stops once the sup-norm change of the (unit-scaled) values drops below
    ``tol`` and returns the greedy policy of that last sweep.

    Raises:
        ConvergenceError: ``max_iters`` sweeps were not enough.
    """
    if not tol > 0:
        raise InvalidInputError("tol must be positive")
    bell = _Bellman(model)
    v = np.zeros((model.n_channel, model.n_q + 1), dtype=np.longdouble)
    residuals = []
    for _ in range(max_iters):
        v_new, policy = bell.greedy(bell.q_values(v))
        res = float(np.max(np.abs(v_new - v)))
        residuals.append(res)
        v = v_new
        if res < tol:
            log.info("value iteration converged in %d sweeps (residual %.3e)", len(residuals), res)
            return ValueTable(v.astype(float), model.reward_scale, residuals), policy
    raise ConvergenceError("value iteration did not converge", residuals[-1], len(residuals))


def greedy_policy(model: MdpModel, values: ValueTable) -> Policy:
    """Greedy policy with respect to a given value table (one extra sweep)."""
    bell = _Bellman(model)
    _, policy = bell.greedy(bell.q_values(values.v_units.astype(np.longdouble)))
    return policy


# ------------------------------------------------------------------- io

def solution_to_dict(model: MdpModel, values: ValueTable, policy: Policy) -> dict:
    c, q = policy.shape
    return {
        "format": POLICY_FORMAT,
        "version": POLICY_VERSION,
        "n_channel": c,
        "n_queue": q,
        "m": policy.m.ravel().tolist(),
        "n": policy.n.ravel().tolist(),
        "value": values.v.ravel().tolist(),
        "value_units": values.v_units.ravel().tolist(),
        "value_scale": values.scale,
        "residuals": values.residuals,
        "model": model.params(),
    }


def solution_to_json(model: MdpModel, values: ValueTable, policy: Policy) -> str:
    return json.dumps(solution_to_dict(model, values, policy), indent=1)


def solution_from_dict(d: dict) -> tuple[MdpModel, ValueTable, Policy]:
    if d.get("format") != POLICY_FORMAT or d.get("version") != POLICY_VERSION:
        raise InvalidInputError(f"not a version-{POLICY_VERSION} policy document")
    shape = (d["n_channel"], d["n_queue"])
    policy = Policy(np.array(d["m"], dtype=int).reshape(shape), np.array(d["n"], dtype=int).reshape(shape))
    values = ValueTable(np.array(d["value_units"]).reshape(shape), d["value_scale"], list(d["residuals"]))
    return MdpModel.from_params(d["model"]), values, policy


def solution_from_json(text: str) -> tuple[MdpModel, ValueTable, Policy]:
    return solution_from_dict(json.loads(text))
