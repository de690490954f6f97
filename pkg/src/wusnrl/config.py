"""Run configuration; defaults are the reference experiment parameters.

Config files are TOML with one section per component; any key left out keeps
its default.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Optional

import toml

from .channel import LinkGeometry, RadioConfig
from .data import SynthConfig, synth_config_from_dict
from .errors import ConfigurationError
from .simulator import MdpSettings


@dataclass(frozen=True)
class HmmSettings:
    n_states: int = 15
    max_iters: int = 500
    tol: float = 1e-6
    cov_floor: float = 1e-6
    window: int = 0  # 0 trains on the whole sequence


@dataclass(frozen=True)
class SweepSettings:
    powers: tuple = (0.001, 0.002, 0.005, 0.01, 0.0125, 0.015, 0.02, 0.05, 0.1)
    kinds: tuple = ("rl", "bpsk", "8psk")
    n_q_values: tuple = (5, 10, 20, 30, 50, 75, 100, 150, 200)
    queue_power: float = 0.01
    repeats: int = 3
    decode: str = "filter"


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    geometry: LinkGeometry = LinkGeometry()
    radio: RadioConfig = RadioConfig()
    hmm: HmmSettings = HmmSettings()
    mdp: MdpSettings = MdpSettings()
    synth: SynthConfig = SynthConfig()
    sweep: SweepSettings = SweepSettings()

    def to_dict(self) -> dict:
        d = {"seed": self.seed}
        for name in ("geometry", "radio", "hmm", "mdp", "sweep"):
            d[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(getattr(self, name)).items()}
        s = self.synth
        d["synth"] = {"length": s.length, "step": s.step, "epsilon": asdict(s.epsilon), "sigma": asdict(s.sigma)}
        return d

    def dumps(self) -> str:
        return toml.dumps(self.to_dict())


def _section(cls_default, values: dict, name: str):
    known = {f.name: f for f in fields(cls_default)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigurationError(f"unknown keys in [{name}]: {sorted(unknown)}")
    kw = {}
    for k, v in values.items():
        cur = getattr(cls_default, k)
        kw[k] = tuple(v) if isinstance(cur, tuple) else type(cur)(v)
    return replace(cls_default, **kw)


def config_from_dict(d: dict) -> RunConfig:
    base = RunConfig()
    unknown = set(d) - {"seed", "geometry", "radio", "hmm", "mdp", "synth", "sweep"}
    if unknown:
        raise ConfigurationError(f"unknown config sections: {sorted(unknown)}")
    kw = {}
    if "seed" in d:
        kw["seed"] = int(d["seed"])
    for name in ("geometry", "radio", "hmm", "mdp", "sweep"):
        if name in d:
            kw[name] = _section(getattr(base, name), d[name], name)
    if "synth" in d:
        kw["synth"] = synth_config_from_dict(d["synth"])
    return replace(base, **kw)


def load_config(path: Optional[str | Path]) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigurationError(f"config file not found: {p}")
    return config_from_dict(toml.load(p))
