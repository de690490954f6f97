"""Soil-to-air uplink channel: propagation constant, path loss, SNR and MPSK BER.

All functions accept scalars or numpy arrays for their numeric arguments and
broadcast the usual way. Losses are in dB, powers in W.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erfc

from .errors import InvalidInputError, InvalidModulationError

MU0 = 4e-7 * np.pi
EPS0 = 8.854187817e-12
C0 = 299792458.0

MODULATIONS = (2, 4, 8)


@dataclass(frozen=True)
class DielectricState:
    """Relative permittivity and conductivity (S/m) of the soil."""

    epsilon_r: float
    sigma: float


@dataclass(frozen=True)
class LinkGeometry:
    d_ug: float = 0.095
    d_ag: float = 20.0
    f: float = 300e6
    g_t: float = 5.0
    g_r: float = 5.0

    def __post_init__(self):
        if not (self.d_ug > 0 and self.d_ag > 0 and self.f > 0):
            raise InvalidInputError(f"non-positive geometry: {self}")


@dataclass(frozen=True)
class PropagationConstant:
    alpha: float  # Np/m
    beta: float  # rad/m


@dataclass(frozen=True)
class RadioConfig:
    """Transmitter and receiver parameters.

    Noise power is configured in dBm; ``eta`` gives it in W.
    """

    p_t: float = 0.01
    noise_dbm: float = -100.0
    t_sym: float = 1 / 60000
    packet_len: int = 1000

    def __post_init__(self):
        if not self.p_t > 0:
            raise InvalidInputError("p_t must be positive")
        if not self.t_sym > 0:
            raise InvalidInputError("t_sym must be positive")
        if int(self.packet_len) != self.packet_len or self.packet_len < 1:
            raise InvalidInputError("packet_len must be a positive integer")

    @property
    def eta(self) -> float:
        return 10 ** (self.noise_dbm / 10) * 1e-3

    def with_power(self, p_t: float) -> "RadioConfig":
        return RadioConfig(p_t, self.noise_dbm, self.t_sym, self.packet_len)


def _check_finite(*values):
    for v in values:
        if not np.all(np.isfinite(v)):
            raise InvalidInputError(f"non-finite input: {v!r}")


def _complex_relative_permittivity(epsilon_r, sigma, f):
    return np.asarray(epsilon_r) - 1j * np.asarray(sigma) / (2 * np.pi * f * EPS0)


def propagation_constant(d: DielectricState, f: float) -> PropagationConstant:
    """Attenuation and phase constants of the soil.

    k_s = j*2*pi*f*sqrt(mu0*(eps0*eps_r - j*sigma/(2*pi*f))) = alpha + j*beta.
    """
    _check_finite(d.epsilon_r, d.sigma, f)
    if not f > 0:
        raise InvalidInputError("frequency must be positive")
    omega = 2 * np.pi * f
    eps_c = EPS0 * np.asarray(d.epsilon_r, dtype=float) - 1j * np.asarray(d.sigma, dtype=float) / omega
    ks = 1j * omega * np.sqrt(MU0 * eps_c)
    # principal sqrt has Im < 0 here, so Re(ks) >= 0 and Im(ks) > 0
    return PropagationConstant(alpha=np.abs(ks.real), beta=np.abs(ks.imag))


def underground_loss_db(pc: PropagationConstant, d_ug: float) -> float:
    if not np.all(np.asarray(d_ug) > 0):
        raise InvalidInputError("d_ug must be positive")
    return 6.4 + 20 * np.log10(d_ug) + 20 * np.log10(pc.beta) + 8.69 * pc.alpha * d_ug


def aboveground_loss_db(f: float, d_ag: float) -> float:
    if not (np.all(np.asarray(f) > 0) and np.all(np.asarray(d_ag) > 0)):
        raise InvalidInputError("f and d_ag must be positive")
    return 20 * np.log10(4 * np.pi * d_ag * f / C0)


def refraction_loss_db(d: DielectricState, f: float) -> float:
    """Normal-incidence transmission mismatch loss at the soil-air boundary."""
    n = np.sqrt(_complex_relative_permittivity(d.epsilon_r, d.sigma, f)).real
    return 10 * np.log10((n + 1) ** 2 / (4 * n))


def path_loss_db(d: DielectricState, g: LinkGeometry) -> float:
    """Total uplink path loss, antenna gains subtracted."""
    pc = propagation_constant(d, g.f)
    return (
        underground_loss_db(pc, g.d_ug)
        + aboveground_loss_db(g.f, g.d_ag)
        + refraction_loss_db(d, g.f)
        - g.g_t
        - g.g_r
    )


def linear_gain(pl_db):
    _check_finite(pl_db)
    return 10 ** (-np.asarray(pl_db, dtype=float) / 10)


def snr(pl_db, radio: RadioConfig):
    return radio.p_t * linear_gain(pl_db) / radio.eta


def qfunc(x):
    """Standard Gaussian tail probability."""
    return 0.5 * erfc(np.asarray(x, dtype=float) / np.sqrt(2))


def ber_mpsk(m: int, snr):
    """Approximate bit error rate of M-PSK at the given linear SNR."""
    if m not in MODULATIONS:
        raise InvalidModulationError(f"modulation order must be one of {MODULATIONS}, got {m}")
    snr = np.asarray(snr, dtype=float)
    if np.any(snr < 0):
        raise InvalidInputError("snr must be non-negative")
    k = max(np.log2(m), 2)
    amp = np.sqrt(2 * snr)
    total = sum(qfunc(amp * np.sin((2 * i - 1) * np.pi / m)) for i in range(1, max(m // 4, 1) + 1))
    out = np.clip(2 / k * total, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def packet_fail_prob(pe, packet_len: int):
    """1 - (1 - pe)**packet_len, accurate for tiny pe."""
    pe = np.asarray(pe, dtype=float)
    with np.errstate(divide="ignore"):
        out = -np.expm1(packet_len * np.log1p(-pe))
    out = np.where(pe >= 1, 1.0, out)
    return float(out) if out.ndim == 0 else out


def packet_success_prob(pe, packet_len: int):
    if packet_len < 1:
        raise InvalidInputError("packet_len must be >= 1")
    pe = np.asarray(pe, dtype=float)
    if np.any((pe < 0) | (pe > 1)):
        raise InvalidInputError("pe must lie in [0, 1]")
    out = np.power(1 - pe, packet_len)
    return float(out) if out.ndim == 0 else out
