"""Command-line entry point: ``wusnrl {synth,ingest,train,solve,simulate,sweep}``."""

from __future__ import annotations

import argparse
import io
import json
import logging
import subprocess
import sys
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .config import RunConfig, load_config
from .data import (
    CsvSchema, PathLossTrace, clean, parse_csv, pl_swing, read_trace_csv, synth_generate,
    to_pathloss_trace, write_series_csv, write_trace_csv,
)
from .errors import ConvergenceError, WusnError
from .hmm import GaussianHmm, fit_em, state_summary, window_lengths
from .mdp import solution_from_dict, solution_to_dict
from .simulator import (
    METRIC_COLUMNS, RLPolicy, SenseThenTransmit, _cell, metrics_csv, queue_occupancy_report,
    run, run_power_sweep, run_queue_sweep,
)

log = logging.getLogger("wusnrl")


def artifact_version() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _report(cfg: RunConfig, command: str, body: dict) -> str:
    doc = {
        "command": command,
        "version": artifact_version(),
        "generated_at": datetime.now(timezone.utc).isoformat(),
        "config": cfg.to_dict(),
        **body,
    }
    return json.dumps(doc, indent=1, default=_json_default)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def load_trace(path: Path, cfg: RunConfig) -> PathLossTrace:
    """Path-loss trace from either a trace CSV or a raw soil CSV."""
    text = path.read_text(encoding="utf-8")
    header = text.split("\n", 1)[0]
    if "pl_db" in header:
        return read_trace_csv(text, cfg.geometry)
    schema = CsvSchema(step=cfg.synth.step)
    if "t_index" in header:
        schema = replace(schema, timestamp="t_index", epsilon="epsilon", sigma="sigma", time_is_index=True)
    return to_pathloss_trace(clean(parse_csv(text, schema)), cfg.geometry)


# ------------------------------------------------------------------ commands

def cmd_synth(cfg: RunConfig, out: Path) -> int:
    series = synth_generate(cfg.synth, cfg.seed)
    buf = io.StringIO()
    write_series_csv(series, buf, calendar=True)
    _write(out, buf.getvalue())
    swing = pl_swing(to_pathloss_trace(clean(series), cfg.geometry))
    log.info("wrote %d samples to %s (path-loss swing %.2f dB)", len(series), out, swing)
    return 0


def cmd_ingest(cfg: RunConfig, data: Path, out: Path, trace_out: Optional[Path] = None) -> int:
    series = clean(parse_csv(data.read_bytes(), CsvSchema(step=cfg.synth.step)))
    buf = io.StringIO()
    write_series_csv(series, buf)
    _write(out, buf.getvalue())
    trace = to_pathloss_trace(series, cfg.geometry)
    buf = io.StringIO()
    write_trace_csv(trace, buf)
    _write(trace_out or out.with_name(out.stem + "_trace.csv"), buf.getvalue())
    return 0


def cmd_train(cfg: RunConfig, data: Path, model_out: Path) -> int:
    trace = load_trace(data, cfg)
    obs = trace.observations()
    h = fit_em(
        obs, cfg.hmm.n_states, seed=cfg.seed, max_iters=cfg.hmm.max_iters, tol=cfg.hmm.tol,
        cov_floor=cfg.hmm.cov_floor, lengths=window_lengths(len(obs), cfg.hmm.window),
    )
    _write(model_out, h.to_json())
    rows = ["state,mean_pl_db,mean_delta_db,self_transition"]
    for i, (pl, d) in enumerate(state_summary(h)):
        rows.append(f"{i},{float(pl)!r},{float(d)!r},{float(h.trans[i, i])!r}")
    _write(model_out.with_suffix(".states.csv"), "\n".join(rows) + "\n")
    log.info("trained %d-state HMM in %d EM iterations", h.n_states, h.fit_info["iterations"])
    return 0


def cmd_solve(cfg: RunConfig, model_path: Path, policy_out: Path) -> int:
    h = GaussianHmm.from_json(model_path.read_text())
    try:
        model, values, policy = cfg.mdp.solve(h, cfg.radio)
    except ConvergenceError as e:
        log.error("%s", e)
        return 3
    doc = solution_to_dict(model, values, policy)
    doc["hmm"] = h.to_dict()
    _write(policy_out, json.dumps(doc, indent=1))
    _write(
        policy_out.with_suffix(".residuals.csv"),
        "sweep,residual\n" + "".join(f"{i + 1},{r!r}\n" for i, r in enumerate(values.residuals)),
    )
    log.info("solved in %d sweeps, final residual %.3e", values.sweeps, values.residuals[-1])
    return 0


def _load_policy(path: Path):
    doc = json.loads(path.read_text())
    model, values, policy = solution_from_dict(doc)
    if "hmm" not in doc:
        raise WusnError(f"{path} carries no HMM; re-run `solve`")
    return model, policy, GaussianHmm.from_dict(doc["hmm"])


def _out_pair(out: Path) -> tuple[Path, Path]:
    if out.suffix == ".json":
        return out.with_suffix(".csv"), out
    if out.suffix == ".csv":
        return out, out.with_suffix(".json")
    return out.with_name(out.name + ".csv"), out.with_name(out.name + ".json")


def cmd_simulate(cfg: RunConfig, policy_path: Path, trace_path: Path, report_out: Path) -> int:
    model, policy, h = _load_policy(policy_path)
    trace = load_trace(trace_path, cfg)
    radio = replace(cfg.radio, p_t=model.p_t)
    kinds = [RLPolicy(policy, h, decode=cfg.sweep.decode), SenseThenTransmit(2), SenseThenTransmit(8)]
    metrics = []
    for i, kind in enumerate(kinds):
        cap = model.n_q if isinstance(kind, RLPolicy) else 0
        metrics.append(run(trace, kind, radio, cap, cfg.seed ^ i, t_max=model.t_max))
    csv_path, json_path = _out_pair(report_out)
    _write(csv_path, metrics_csv(metrics))
    body = {
        "runs": [
            {**m.row(), "physical_energy": m.physical_energy, "conserved": m.conserved(),
             "queue_occupancy": queue_occupancy_report(m)}
            for m in metrics
        ]
    }
    _write(json_path, _report(cfg, "simulate", body))
    return 0


def _mean_by(rows, key):
    out = {}
    for r in rows:
        out.setdefault(key(r), []).append(r)
    return out


def cmd_sweep(cfg: RunConfig, kind: str, data: Path, model_path: Path, out: Path, jobs: int = 1) -> int:
    h = GaussianHmm.from_json(model_path.read_text())
    trace = load_trace(data, cfg)
    sw = cfg.sweep
    records = []
    for r in range(sw.repeats):
        seed = cfg.seed + r
        if kind == "power":
            res = run_power_sweep(
                trace, list(sw.kinds), list(sw.powers), seed, hmm=h, radio=cfg.radio,
                settings=cfg.mdp, decode=sw.decode, jobs=jobs,
            )
            records += [(seed, m) for _, _, m in res]
        else:
            radio = replace(cfg.radio, p_t=sw.queue_power)
            res = run_queue_sweep(
                trace, list(sw.n_q_values), radio, seed, hmm=h, settings=cfg.mdp,
                decode=sw.decode, jobs=jobs,
            )
            records += [(seed, m) for _, m in res]
            base = run(trace, SenseThenTransmit(2), radio, 0, seed ^ len(sw.n_q_values))
            records.append((seed, base))

    csv_path, json_path = _out_pair(out)
    lines = [",".join(METRIC_COLUMNS + ["seed"])]
    for seed, m in records:
        row = m.row()
        lines.append(",".join([_cell(row[c]) for c in METRIC_COLUMNS] + [str(seed)]))
    _write(csv_path, "\n".join(lines) + "\n")

    flags = {}
    if kind == "power":
        avg = {
            k: float(np.mean([m.dropped for _, m in v]))
            for k, v in _mean_by(records, lambda x: (x[1].kind, x[1].power_w)).items()
        }
        for k in sw.kinds:
            curve = [avg[(k, p)] for p in sw.powers]
            flags[f"dropped_nonincreasing_{k}"] = bool(all(b <= a for a, b in zip(curve, curve[1:])))
        if "rl" in sw.kinds and "8psk" in sw.kinds:
            pmax = max(sw.powers)
            ratio = {
                k: float(np.mean([m.energy_metric / m.successful for _, m in records
                                  if m.kind == k and m.power_w == pmax and m.successful]))
                for k in ("rl", "8psk")
            }
            gap = abs(ratio["rl"] - ratio["8psk"]) / ratio["8psk"]
            flags["energy_ratio_gap_at_max_power"] = gap
            flags["rl_converges_to_8psk"] = bool(gap <= 0.05)
        flags["mean_dropped"] = {f"{k}@{p}": v for (k, p), v in sorted(avg.items())}
    else:
        avg = {
            nq: float(np.mean([m.dropped for _, m in v]))
            for nq, v in _mean_by([x for x in records if x[1].kind == "rl"], lambda x: x[1].n_q).items()
        }
        curve = [avg[n] for n in sw.n_q_values]
        bpsk = float(np.mean([m.dropped for _, m in records if m.kind == "bpsk"]))
        flags["dropped_nonincreasing_rl"] = bool(all(b <= a for a, b in zip(curve, curve[1:])))
        flags["rl_below_bpsk_at_largest_nq"] = bool(curve[-1] < bpsk)
        flags["mean_dropped_rl"] = {str(k): v for k, v in avg.items()}
        flags["mean_dropped_bpsk"] = bpsk
    _write(json_path, _report(cfg, f"sweep-{kind}", {"flags": flags, "rows": len(records)}))
    return 0


# ---------------------------------------------------------------------- main

def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--seed", type=int, help="top-level seed (overrides config)")
    common.add_argument("--out", help="output path")
    common.add_argument("--jobs", type=int, default=1, help="parallel sweep workers")
    common.add_argument("--print-config", action="store_true", help="dump effective config and exit")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="wusnrl", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="write a synthetic soil CSV")
    s = sub.add_parser("ingest", parents=[common], help="clean a soil CSV and derive its path-loss trace")
    s.add_argument("data")
    s.add_argument("--trace-out")
    s = sub.add_parser("train", parents=[common], help="fit the channel HMM")
    s.add_argument("data")
    s = sub.add_parser("solve", parents=[common], help="solve the MDP for a trained HMM")
    s.add_argument("model")
    s = sub.add_parser("simulate", parents=[common], help="run RL and baselines on a trace")
    s.add_argument("policy")
    s.add_argument("trace")
    s = sub.add_parser("sweep", parents=[common], help="power or queue-capacity sweep")
    s.add_argument("kind", choices=["power", "queue"])
    s.add_argument("data")
    s.add_argument("model")
    return p


DEFAULT_OUT = {
    "synth": "soil.csv", "ingest": "cleaned.csv", "train": "model.json", "solve": "policy.json",
    "simulate": "report.json", "sweep": "sweep.json",
}


def main(argv: Optional[list[str]] = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if args.print_config:
            sys.stdout.write(cfg.dumps())
            return 0
        out = Path(args.out or DEFAULT_OUT[args.command])
        if args.command == "synth":
            return cmd_synth(cfg, out)
        if args.command == "ingest":
            return cmd_ingest(cfg, Path(args.data), out, Path(args.trace_out) if args.trace_out else None)
        if args.command == "train":
            return cmd_train(cfg, Path(args.data), out)
        if args.command == "solve":
            return cmd_solve(cfg, Path(args.model), out)
        if args.command == "simulate":
            return cmd_simulate(cfg, Path(args.policy), Path(args.trace), out)
        return cmd_sweep(cfg, args.kind, Path(args.data), Path(args.model), out, args.jobs)
    except WusnError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
