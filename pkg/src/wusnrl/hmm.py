"""Gaussian-emission hidden Markov model over (path loss, path-loss change).

Training is Baum-Welch with scaled forward-backward recursions. The inner
time loops are compiled with numba; everything else is plain numpy.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numba
import numpy as np

from .errors import DegenerateFitError, InvalidInputError

log = logging.getLogger(__name__)

FORMAT_TAG = "wusnrl.gaussian_hmm"
FORMAT_VERSION = 1


@dataclass(eq=False)
class GaussianHmm:
    initial: np.ndarray
    trans: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    fit_info: Optional[dict] = field(default=None, repr=False)

    def __post_init__(self):
        self.initial = np.asarray(self.initial, dtype=float)
        self.trans = np.asarray(self.trans, dtype=float)
        self.means = np.asarray(self.means, dtype=float).reshape(-1, 2)
        self.covs = np.asarray(self.covs, dtype=float).reshape(-1, 2, 2)
        n = len(self.initial)
        if self.trans.shape != (n, n) or len(self.means) != n or len(self.covs) != n:
            raise InvalidInputError("inconsistent HMM dimensions")
        if abs(self.initial.sum() - 1) > 1e-9 or np.any(np.abs(self.trans.sum(axis=1) - 1) > 1e-9):
            raise InvalidInputError("initial and transition rows must sum to 1")
        if np.any(self.covs[:, 0, 0] <= 0) or np.any(self.covs[:, 1, 1] <= 0) or np.any(np.linalg.det(self.covs) <= 0):
            raise InvalidInputError("covariances must be positive definite")

    @property
    def n_states(self) -> int:
        return len(self.initial)

    def same_as(self, other: "GaussianHmm") -> bool:
        return all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("initial", "trans", "means", "covs")
        )

    def permuted(self, order: Sequence[int]) -> "GaussianHmm":
        """Relabel states so that new state i is old state ``order[i]``."""
        order = np.asarray(order)
        return GaussianHmm(
            self.initial[order],
            self.trans[np.ix_(order, order)],
            self.means[order],
            self.covs[order],
            self.fit_info,
        )

    def sorted_by_pl(self) -> "GaussianHmm":
        return self.permuted(np.argsort(self.means[:, 0], kind="stable"))

    # -------------------------------------------------------------- io
    def to_dict(self) -> dict:
        return {
            "format": FORMAT_TAG,
            "version": FORMAT_VERSION,
            "n_states": self.n_states,
            "initial": self.initial.tolist(),
            "trans": self.trans.ravel().tolist(),
            "means": self.means.ravel().tolist(),
            "covs": self.covs.ravel().tolist(),
        }

    def to_json(self) -> str:
        # repr-based float output is the shortest exact round-trip form
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianHmm":
        if d.get("format") != FORMAT_TAG or d.get("version") != FORMAT_VERSION:
            raise InvalidInputError(f"not a version-{FORMAT_VERSION} HMM document")
        n = int(d["n_states"])
        return cls(
            np.array(d["initial"], dtype=float),
            np.array(d["trans"], dtype=float).reshape(n, n),
            np.array(d["means"], dtype=float).reshape(n, 2),
            np.array(d["covs"], dtype=float).reshape(n, 2, 2),
        )

    @classmethod
    def from_json(cls, text: str) -> "GaussianHmm":
        return cls.from_dict(json.loads(text))


# ------------------------------------------------------------------ kernels

def _as_obs(obs) -> np.ndarray:
    x = np.asarray(obs, dtype=float)
    if x.ndim == 1 and x.size == 2:
        x = x.reshape(1, 2)
    if x.ndim != 2 or x.shape[1] != 2:
        raise InvalidInputError("observations must have shape (T, 2)")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("observations must be finite")
    return x


def emission_logpdf(h: GaussianHmm, obs) -> np.ndarray:
    """(T, N) matrix of log N(obs_t; mean_n, cov_n)."""
    x = _as_obs(obs)
    return _emission_logpdf(x, h.means, h.covs)


def _emission_logpdf(x, means, covs):
    inv = np.linalg.inv(covs)
    _, logdet = np.linalg.slogdet(covs)
    diff = x[:, None, :] - means[None, :, :]
    maha = np.einsum("tni,nij,tnj->tn", diff, inv, diff)
    return -0.5 * (maha + logdet[None, :]) - np.log(2 * np.pi)


@numba.njit(cache=True)
def _forward(logb, initial, trans):
    T, N = logb.shape
    alpha = np.empty((T, N))
    logc = np.empty(T)
    bs = np.empty((T, N))
    for t in range(T):
        m = logb[t, 0]
        for j in range(1, N):
            if logb[t, j] > m:
                m = logb[t, j]
        for j in range(N):
            bs[t, j] = np.exp(logb[t, j] - m)
        c = 0.0
        for j in range(N):
            if t == 0:
                p = initial[j]
            else:
                p = 0.0
                for i in range(N):
                    p += alpha[t - 1, i] * trans[i, j]
            alpha[t, j] = p * bs[t, j]
            c += alpha[t, j]
        for j in range(N):
            alpha[t, j] /= c
        logc[t] = np.log(c) + m
    return alpha, logc, bs


@numba.njit(cache=True)
def _backward(bs, alpha, trans):
    T, N = bs.shape
    beta = np.empty((T, N))
    xi = np.zeros((N, N))
    tmp = np.empty(N)
    for j in range(N):
        beta[T - 1, j] = 1.0
    for t in range(T - 2, -1, -1):
        # c_{t+1} recovered from unnormalised next-step mass
        c = 0.0
        for j in range(N):
            p = 0.0
            for i in range(N):
                p += alpha[t, i] * trans[i, j]
            c += p * bs[t + 1, j]
        for j in range(N):
            tmp[j] = bs[t + 1, j] * beta[t + 1, j] / c
        for i in range(N):
            s = 0.0
            for j in range(N):
                s += trans[i, j] * tmp[j]
                xi[i, j] += alpha[t, i] * trans[i, j] * tmp[j]
            beta[t, i] = s
    return beta, xi


@numba.njit(cache=True)
def _viterbi(logb, log_initial, log_trans):
    T, N = logb.shape
    delta = np.empty(N)
    nxt = np.empty(N)
    back = np.empty((T, N), dtype=np.int64)
    for j in range(N):
        delta[j] = log_initial[j] + logb[0, j]
    for t in range(1, T):
        for j in range(N):
            best = -np.inf
            arg = 0
            for i in range(N):
                v = delta[i] + log_trans[i, j]
                if v > best:
                    best = v
                    arg = i
            nxt[j] = best + logb[t, j]
            back[t, j] = arg
        for j in range(N):
            delta[j] = nxt[j]
    path = np.empty(T, dtype=np.int64)
    best = -np.inf
    arg = 0
    for j in range(N):
        if delta[j] > best:
            best = delta[j]
            arg = j
    path[T - 1] = arg
    for t in range(T - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path


@numba.njit(cache=True)
def _sample_states(cum_initial, cum_trans, u):
    T = len(u)
    N = len(cum_initial)
    s = np.empty(T, dtype=np.int64)
    prev = -1
    for t in range(T):
        row = cum_initial if t == 0 else cum_trans[prev]
        k = 0
        while k < N - 1 and u[t] >= row[k]:
            k += 1
        s[t] = k
        prev = k
    return s


# ------------------------------------------------------------------ queries

def log_likelihood(h: GaussianHmm, obs) -> float:
    _, logc, _ = _forward(emission_logpdf(h, obs), h.initial, h.trans)
    return float(logc.sum())


def filtered_posteriors(h: GaussianHmm, obs) -> np.ndarray:
    """P(c_t | o_1..o_t) for every t, shape (T, N)."""
    alpha, _, _ = _forward(emission_logpdf(h, obs), h.initial, h.trans)
    return alpha


def filter_states(h: GaussianHmm, obs) -> np.ndarray:
    """Online decoded state for every prefix of ``obs`` in one pass."""
    return np.argmax(filtered_posteriors(h, obs), axis=1)


def filter_state(h: GaussianHmm, obs_prefix) -> int:
    x = _as_obs(obs_prefix)
    if len(x) == 0:
        raise InvalidInputError("empty observation prefix")
    return int(filter_states(h, x)[-1])


def viterbi(h: GaussianHmm, obs) -> np.ndarray:
    x = _as_obs(obs)
    if len(x) == 0:
        raise InvalidInputError("empty observation sequence")
    with np.errstate(divide="ignore"):
        return _viterbi(emission_logpdf(h, x), np.log(h.initial), np.log(h.trans))


def sample(h: GaussianHmm, length: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``length`` observations; returns (obs, states)."""
    if length < 1:
        raise InvalidInputError("length must be >= 1")
    rng = np.random.default_rng(seed)
    u = rng.random(length)
    states = _sample_states(np.cumsum(h.initial), np.cumsum(h.trans, axis=1), u)
    z = rng.standard_normal((length, 2))
    chol = np.linalg.cholesky(h.covs)
    obs = h.means[states] + np.einsum("tij,tj->ti", chol[states], z)
    return obs, states


def state_summary(h: GaussianHmm) -> np.ndarray:
    """Per-state (mean path loss, mean path-loss change), shape (N, 2)."""
    return h.means.copy()


# ------------------------------------------------------------------ fitting

def _floor_cov(cov: np.ndarray, floor: float) -> np.ndarray:
    w, v = np.linalg.eigh(cov)
    if w.min() >= floor:
        return cov
    w = np.maximum(w, floor)
    out = (v * w) @ v.T
    return 0.5 * (out + out.T)


def _kmeans_init(x: np.ndarray, n: int, rng: np.random.Generator, iters: int = 20):
    """k-means++ seeding plus a few Lloyd steps on standardized data."""
    scale = x.std(axis=0)
    scale[scale == 0] = 1.0
    z = (x - x.mean(axis=0)) / scale
    centers = [z[rng.integers(len(z))]]
    d2 = np.sum((z - centers[0]) ** 2, axis=1)
    for _ in range(1, n):
        if d2.sum() <= 0:
            raise DegenerateFitError(f"fewer than {n} distinct observations; cannot seed {n} states")
        centers.append(z[rng.choice(len(z), p=d2 / d2.sum())])
        d2 = np.minimum(d2, np.sum((z - centers[-1]) ** 2, axis=1))
    c = np.array(centers)
    for _ in range(iters):
        labels = np.argmin(((z[:, None, :] - c[None]) ** 2).sum(-1), axis=1)
        for k in range(n):
            if np.any(labels == k):
                c[k] = z[labels == k].mean(axis=0)
    labels = np.argmin(((z[:, None, :] - c[None]) ** 2).sum(-1), axis=1)
    return c * scale + x.mean(axis=0), labels


def _split(x: np.ndarray, lengths) -> list[np.ndarray]:
    if lengths is None:
        return [x]
    lengths = list(lengths)
    if sum(lengths) != len(x) or any(n < 1 for n in lengths):
        raise InvalidInputError("lengths must be positive and sum to len(obs)")
    return np.split(x, np.cumsum(lengths)[:-1])


def window_lengths(total: int, window: Optional[int]) -> Optional[list[int]]:
    """Split ``total`` samples into consecutive windows (last one may be longer)."""
    if not window or window >= total:
        return None
    k = total // window
    out = [window] * k
    out[-1] += total - k * window
    return out


def fit_em(
    obs,
    n_states: int = 15,
    seed: int = 0,
    max_iters: int = 500,
    tol: float = 1e-6,
    cov_floor: float = 1e-6,
    lengths: Optional[Sequence[int]] = None,
    self_loop: float = 0.9,
) -> GaussianHmm:
    """Fit a Gaussian HMM by Baum-Welch.

    Args:
        obs: (T, 2) observations.
        n_states: number of hidden states.
        seed: seeds the k-means++ initialisation; the fit is otherwise deterministic.
        max_iters: EM iteration cap.
        tol: stop once the log-likelihood gain drops below this.
        cov_floor: minimum covariance eigenvalue (dB^2).
        lengths: optional split of ``obs`` into independent sequences.
        self_loop: initial diagonal mass of the transition matrix.

    Returns:
        The fitted model with states sorted by mean path loss. ``fit_info``
        holds the per-iteration log-likelihoods (each evaluated before the
        corresponding M-step) and the iteration count.
    """
    x = _as_obs(obs)
    if n_states < 1:
        raise InvalidInputError("n_states must be >= 1")
    if not tol > 0:
        raise InvalidInputError("tol must be positive")
    if len(x) < 10 * n_states:
        raise InvalidInputError(f"need at least {10 * n_states} observations for {n_states} states")
    seqs = _split(x, lengths)

    if n_states == 1:
        cov = _floor_cov(np.cov(x.T, bias=True), cov_floor)
        h = GaussianHmm(np.ones(1), np.ones((1, 1)), x.mean(axis=0, keepdims=True), cov[None])
        h.fit_info = {"log_likelihoods": [log_likelihood(h, x)], "iterations": 0, "converged": True}
        return h

    if len(np.unique(x, axis=0)) < n_states:
        raise DegenerateFitError(f"fewer than {n_states} distinct observations")
    rng = np.random.default_rng(seed)
    means, labels = _kmeans_init(x, n_states, rng)
    glob = np.cov(x.T, bias=True)
    covs = np.empty((n_states, 2, 2))
    for k in range(n_states):
        pts = x[labels == k]
        covs[k] = _floor_cov(np.cov(pts.T, bias=True) if len(pts) > 2 else glob, cov_floor)
    if np.any(np.linalg.eigvalsh(covs)[:, 0] < cov_floor * (1 - 1e-9)):
        raise DegenerateFitError("covariance floor could not be enforced")
    initial = np.full(n_states, 1.0 / n_states)
    trans = np.full((n_states, n_states), (1 - self_loop) / (n_states - 1))
    np.fill_diagonal(trans, self_loop)

    history = []
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        ll = 0.0
        g_sum = np.zeros(n_states)
        g_x = np.zeros((n_states, 2))
        g_xx = np.zeros((n_states, 2, 2))
        xi = np.zeros((n_states, n_states))
        g0 = np.zeros(n_states)
        for seq in seqs:
            logb = _emission_logpdf(seq, means, covs)
            alpha, logc, bs = _forward(logb, initial, trans)
            beta, xi_s = _backward(bs, alpha, trans)
            ll += logc.sum()
            gamma = alpha * beta
            gamma /= gamma.sum(axis=1, keepdims=True)
            g0 += gamma[0]
            g_sum += gamma.sum(axis=0)
            g_x += gamma.T @ seq
            g_xx += np.einsum("tn,ti,tj->nij", gamma, seq, seq)
            xi += xi_s
        history.append(float(ll))
        if not np.isfinite(ll):
            raise DegenerateFitError("log-likelihood became non-finite")
        if len(history) > 1 and history[-1] - history[-2] < tol:
            converged = True
            break
        # M-step
        initial = g0 / g0.sum()
        trans = xi / xi.sum(axis=1, keepdims=True)
        trans /= trans.sum(axis=1, keepdims=True)
        safe = np.maximum(g_sum, 1e-300)
        means = g_x / safe[:, None]
        for k in range(n_states):
            cov = g_xx[k] / safe[k] - np.outer(means[k], means[k])
            covs[k] = _floor_cov(0.5 * (cov + cov.T), cov_floor)
    log.info("EM stopped after %d iterations, ll=%.6f", it, history[-1])

    h = GaussianHmm(initial, trans, means, covs)
    if not converged:
        # final parameters were updated after the last recorded likelihood
        history.append(log_likelihood(h, x) if lengths is None else sum(log_likelihood(h, s) for s in seqs))
    h = h.sorted_by_pl()
    h.fit_info = {"log_likelihoods": history, "iterations": it, "converged": converged}
    return h
