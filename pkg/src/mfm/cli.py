"""Command-line entry point and experiment configuration.

Configs are flat ``key = value`` files (JSON-typed values, ``#`` comments)
overridable by flags; presets bundle the per-experiment hyperparameters.
Every run writes four artifacts into the output directory: the final
particle ensemble (samples.csv), the trained flow (flow.ckpt), the
per-iteration run log (runlog.csv) and the diagnostics summary
(diagnostics.json), plus the resolved config itself for reruns.
"""

import argparse
import csv
import hashlib
import json
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import diagnostics, driver, flow, targets
from .cfm import OtPathConfig
from .errors import ConfigError
from .flow import OdeConfig
from .kernels import MalaConfig

PRESETS = {
    "gmm4": dict(target="gmm4", particles=128, hidden=128, mala_tau=0.2,
                 iters=5000, kq=100),
    "gmm16": dict(target="gmm16", particles=128, hidden=128, mala_tau=0.2,
                  iters=5000, kq=100, init_mean=[-14.0, -14.0], init_scale=0.5),
    "manywell": dict(target="manywell", particles=128, hidden=128, mala_tau=0.1,
                     iters=5000, kq=100),
    "field": dict(target="field", particles=1024, hidden=256, mala_tau=1e-4,
                  iters=10000, kq=1000),
    "lgcp": dict(target="lgcp", particles=128, hidden=1024, mala_tau=0.01,
                 iters=10000, kq=1000, divergence="hutchinson:1"),
}

_BUNDLED_COUNTS = Path(__file__).parent / "data" / "lgcp_counts_40.csv"


@dataclass
class ExperimentConfig:
    """Flat, fully resolved description of one run."""

    mode: str = "mfm"              # mfm | atsmc | fm-oracle | diagnose
    preset: Optional[str] = None
    target: str = "gmm4"
    seed: Optional[int] = None     # mandatory; no default on purpose
    out: str = "runs/out"
    workers: int = 1
    iters: int = 1000
    particles: int = 128
    kq: int = 100
    alpha: float = 0.5
    mala_tau: float = 0.2
    ode_steps: int = 32
    divergence: str = "exact"      # exact | hutchinson:N
    sigma_min: float = 1e-2
    hidden: int = 128
    step_size: float = 1e-3
    nonlocal_kernel: str = "rwmh"
    n_candidates: int = 4
    temper: bool = True
    diag_samples: int = 2048
    init_mean: Optional[list] = None
    init_scale: float = 1.0
    m_side: int = 40
    counts_csv: Optional[str] = None
    gmm16_seed: int = 0


_FIELD_TYPES = {f.name: f for f in fields(ExperimentConfig)}


def config_lines(cfg: ExperimentConfig) -> str:
    """Canonical flat serialization; its hash stamps every artifact."""
    rows = []
    for name in sorted(_FIELD_TYPES):
        rows.append(f"{name} = {json.dumps(getattr(cfg, name))}")
    return "\n".join(rows) + "\n"


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(config_lines(cfg).encode()).hexdigest()[:16]


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw.strip()


def read_config_file(path) -> dict:
    """Flat key = value lines; unknown keys are rejected downstream."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}", "expected 'key = value'")
        key, raw = stripped.split("=", 1)
        values[key.strip()] = _parse_value(raw)
    return values


def parse_config(path=None, overrides: dict = None) -> ExperimentConfig:
    """Merge preset defaults, config file and flag overrides, then validate."""
    file_values = read_config_file(path) if path else {}
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    merged = dict(file_values)
    merged.update(overrides)

    preset = merged.get("preset")
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError("preset", f"unknown preset {preset!r}; "
                              f"choose from {sorted(PRESETS)}")
        base = dict(PRESETS[preset])
        base.update(merged)
        merged = base

    unknown = set(merged) - set(_FIELD_TYPES)
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown config field")
    cfg = ExperimentConfig(**merged)

    if cfg.seed is None:
        raise ConfigError("seed", "a seed is mandatory")
    if cfg.mode not in ("mfm", "atsmc", "fm-oracle", "diagnose"):
        raise ConfigError("mode", f"unknown mode {cfg.mode!r}")
    if cfg.target not in ("gmm4", "gmm16", "manywell", "field", "lgcp"):
        raise ConfigError("target", f"unknown target {cfg.target!r}")
    if ":" in cfg.divergence:
        name, n = cfg.divergence.split(":", 1)
        if name != "hutchinson" or not n.isdigit() or int(n) < 1:
            raise ConfigError("divergence", f"bad value {cfg.divergence!r}")
    elif cfg.divergence not in ("exact", "hutchinson"):
        raise ConfigError("divergence", f"bad value {cfg.divergence!r}")
    return cfg


def build_target(cfg: ExperimentConfig) -> targets.TargetDensity:
    if cfg.target == "gmm4":
        return targets.make_gmm4()
    if cfg.target == "gmm16":
        return targets.make_gmm16(cfg.gmm16_seed)
    if cfg.target == "manywell":
        return targets.make_many_well()
    if cfg.target == "field":
        return targets.make_field_system()
    spec = targets.LgcpSpec(m_side=cfg.m_side)
    if cfg.counts_csv:
        counts = targets.load_counts_csv(cfg.counts_csv, cfg.m_side)
    elif cfg.m_side == 40 and _BUNDLED_COUNTS.exists():
        counts = targets.load_counts_csv(_BUNDLED_COUNTS, 40)
    else:
        counts = targets.synthetic_lgcp_counts(spec, seed=0)
    return targets.make_lgcp(spec, counts)


def to_driver_config(cfg: ExperimentConfig) -> driver.MfmConfig:
    if ":" in cfg.divergence:
        mode, n_probes = cfg.divergence.split(":")
        ode = OdeConfig(cfg.ode_steps, mode, int(n_probes))
    else:
        ode = OdeConfig(cfg.ode_steps, cfg.divergence, 1)
    return driver.MfmConfig(
        iters=cfg.iters,
        particles=cfg.particles,
        k_q=cfg.kq,
        alpha_target=cfg.alpha,
        mala=MalaConfig(cfg.mala_tau),
        ode=ode,
        ot=OtPathConfig(cfg.sigma_min),
        nonlocal_kernel=cfg.nonlocal_kernel,
        n_candidates=cfg.n_candidates,
        hidden=cfg.hidden,
        step_size=cfg.step_size,
        seed=cfg.seed,
        temper=cfg.temper,
        init_mean=None if cfg.init_mean is None else np.asarray(cfg.init_mean),
        init_scale=cfg.init_scale,
        diag_samples=cfg.diag_samples,
        workers=cfg.workers,
    )


# -- Artifact I/O --------------------------------------------------------------

def _stamp(cfg: ExperimentConfig) -> str:
    return f"# config_hash={config_hash(cfg)} seed={cfg.seed}"


def write_samples_csv(path, cfg: ExperimentConfig, positions: np.ndarray) -> None:
    d = positions.shape[1]
    with open(path, "w", newline="") as fh:
        fh.write(_stamp(cfg) + "\n")
        writer = csv.writer(fh)
        writer.writerow([f"x_{i + 1}" for i in range(d)])
        for row in positions:
            writer.writerow([f"{v:.17g}" for v in row])


def load_samples_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", skiprows=2, ndmin=2)


def write_runlog_csv(path, cfg: ExperimentConfig, rows) -> None:
    cols = ["iteration", "beta", "loss", "acceptance_local", "acceptance_flow"]
    with open(path, "w", newline="") as fh:
        fh.write(_stamp(cfg) + "\n")
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for row in rows:
            writer.writerow({c: f"{row[c]:.17g}" if c != "iteration" else row[c]
                             for c in cols})


def load_runlog_csv(path):
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    return [{k: (int(v) if k == "iteration" else float(v))
             for k, v in row.items()} for row in reader]


def _beta_trace_len(rows) -> int:
    return len({row["beta"] for row in rows})


def write_diagnostics_json(path, report, rows) -> dict:
    payload = {
        "mmd2": report.mmd2_unbiased,
        "ksd_u": report.ksd_u,
        "ksd_v": report.ksd_v,
        "mean_logpi": report.mean_logpi,
        "wall_seconds": report.wall_seconds,
        "acceptance_local": rows[-1]["acceptance_local"] if rows else 0.0,
        "acceptance_flow": rows[-1]["acceptance_flow"] if rows else 0.0,
        "beta_trace_len": _beta_trace_len(rows),
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return payload


# -- Run dispatch ---------------------------------------------------------------

def run(cfg: ExperimentConfig) -> int:
    """Execute one configured run and write its artifacts; returns exit status."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(config_lines(cfg))

    target = build_target(cfg)
    base = targets.standard_normal(target.dim)
    dcfg = to_driver_config(cfg)

    if cfg.mode == "diagnose":
        return _run_diagnose(cfg, out, target, dcfg)

    if cfg.mode == "mfm":
        artifacts = driver.run_mfm(base, target, dcfg)
        flow.save_flow(out / "flow.ckpt", artifacts.flow_params)
        positions, rows, report = (artifacts.ensemble.positions,
                                   artifacts.log_rows, artifacts.report)
    elif cfg.mode == "fm-oracle":
        artifacts = driver.run_fm_oracle(target, dcfg)
        flow.save_flow(out / "flow.ckpt", artifacts.flow_params)
        positions, rows, report = (artifacts.ensemble.positions,
                                   artifacts.log_rows, artifacts.report)
    else:  # atsmc: no flow is trained, diagnostics score the ensemble itself
        t0 = time.perf_counter()
        ens, rows = driver.run_atsmc(base, target, dcfg)
        positions = ens.positions
        exact = target.sampler(driver.diag_rng(cfg.seed), cfg.diag_samples) \
            if target.sampler else None
        report = diagnostics.compute_report(target, positions, exact,
                                wall_seconds=time.perf_counter() - t0,
                                workers=cfg.workers)

    write_samples_csv(out / "samples.csv", cfg, positions)
    write_runlog_csv(out / "runlog.csv", cfg, rows)
    write_diagnostics_json(out / "diagnostics.json", report, rows)
    return 0


def _run_diagnose(cfg, out, target, dcfg) -> int:
    ckpt = out / "flow.ckpt"
    if not ckpt.exists():
        raise ConfigError("out", f"no flow checkpoint at {ckpt}")
    flow_params = flow.load_flow(ckpt)
    rows = load_runlog_csv(out / "runlog.csv")
    report = driver.diagnose_flow(flow_params, target, dcfg)
    write_diagnostics_json(out / "diagnostics.json", report, rows)
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="mfm",
        description="Sample unnormalized targets with flow-assisted adaptive MCMC.")
    parser.add_argument("--config", help="flat key = value config file")
    parser.add_argument("--preset", choices=sorted(PRESETS))
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out")
    parser.add_argument("--workers", type=int)
    parser.add_argument("--mode", choices=["mfm", "atsmc", "fm-oracle", "diagnose"])
    parser.add_argument("--kq", type=int)
    parser.add_argument("--iters", type=int)
    parser.add_argument("--particles", type=int)
    parser.add_argument("--divergence", help="exact or hutchinson:N")
    args = parser.parse_args(argv)

    overrides = {k: getattr(args, k) for k in
                 ("preset", "seed", "out", "workers", "mode", "kq", "iters",
                  "particles", "divergence")}
    try:
        cfg = parse_config(args.config, overrides)
        return run(cfg)
    except Exception as exc:  # structured error report, nonzero exit
        report = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(report), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
