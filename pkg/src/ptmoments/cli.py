"""Command-line front end: ``ptmoments {simulate,estimate,compare,sweep,werner}``.

Every command is a pure function of its config and input files. Outputs go
to ``output_dir`` together with ``manifest-<command>.json``, which lists each
emitted file with its SHA-256 digest and seed. Exit codes: 0 success, 2
config error, 3 data error, 4 resource limit.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .bounds import MAX_SWEEP_SITES, error_scaling_sweep
from .config import ScenarioConfig, WernerConfig, config_from_dict, half_partition, load_config
from .entcond import (
    WernerSpec,
    compare_conditions,
    r3_ratio,
    werner_equivalence_sweep,
    werner_r3_nonmonotone_check,
    werner_state,
)
from .errors import ConfigError, InsufficientDataError, PtMomentsError, ResourceLimitError
from .qstate import (
    DensityMatrix,
    PureState,
    build_hamiltonian,
    depolarize,
    diagonalize,
    evolve,
    ground_state,
    make_ghz,
    make_neel,
    reduced_density_matrix,
)
from .randmeas import generate_dataset, read_dataset, write_dataset
from .shadows import Estimate, estimate, jackknife_derived, jackknife_values, snapshots_from_dataset

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RESOURCE = 4

RATIO = "p2sq_over_p3"
R3 = "R3"
UNDEFINED = "undefined"

_ESTIMATE_COLUMNS = ("dataset", "t_ms", "statistic", "A", "B", "value", "std_error", "m", "p", "method", "seed", "note")


# ---------------------------------------------------------------------------
# output plumbing


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _json_value(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, (np.floating, np.integer)):
        return _json_value(x.item())
    return x


def _finite(obj):
    """Recursively replace non-finite floats (e.g. an unfittable slope) by None."""
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    return _json_value(obj)


def _dumps(obj) -> str:
    return json.dumps(_finite(obj), separators=(",", ":"), ensure_ascii=False, allow_nan=False)


class OutputSet:
    """Files written by one command; ``finish`` writes the manifest."""

    def __init__(self, out_dir: Path, command: str, cfg: Optional[ScenarioConfig], config_digest: Optional[str]):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.cfg = cfg
        self.config_digest = config_digest
        self.entries = []

    def path(self, name: str) -> Path:
        return self.out_dir / name

    def register(self, name: str, **meta) -> Path:
        path = self.path(name)
        entry = {"name": name, "sha256": _sha256(path), "bytes": path.stat().st_size}
        entry.update(meta)
        self.entries.append(entry)
        return path

    def write_text(self, name: str, text: str, **meta) -> Path:
        with open(self.path(name), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        return self.register(name, **meta)

    def write_csv(self, name: str, rows: list, columns, **meta) -> Path:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _csv_cell(row.get(k)) for k in columns})
        return self.write_text(name, buf.getvalue(), **meta)

    def write_jsonl(self, name: str, records: list, **meta) -> Path:
        return self.write_text(name, "".join(_dumps(r) + "\n" for r in records), **meta)

    def write_json(self, name: str, obj, **meta) -> Path:
        return self.write_text(name, json.dumps(_finite(obj), indent=2, allow_nan=False) + "\n", **meta)

    def finish(self) -> Path:
        manifest = {
            "command": self.command,
            "version": __version__,
            "config_sha256": self.config_digest,
            "seed": None if self.cfg is None else self.cfg.seed,
            "files": self.entries,
        }
        path = self.path(f"manifest-{self.command}.json")
        path.write_text(json.dumps(manifest, indent=2, allow_nan=False) + "\n", encoding="utf-8")
        return path


def _csv_cell(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value) if math.isfinite(value) else ""
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    return value


def _fmt_ms(t_ms: float) -> str:
    return f"{t_ms:g}".replace("-", "m")


# ---------------------------------------------------------------------------
# states


def derive_seed(seed: int, *keys: int) -> int:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def _werner_qubit_state(cfg_w: WernerConfig, alpha: Optional[float] = None) -> DensityMatrix:
    d = cfg_w.d
    if d & (d - 1):
        raise ConfigError(f"werner.d: measurement simulation needs d a power of two, got {d}")
    rho = werner_state(WernerSpec(d, cfg_w.alpha if alpha is None else alpha))
    k = int(round(math.log2(d)))
    return DensityMatrix((2,) * (2 * k), rho.matrix)


def scenario_states(cfg: ScenarioConfig) -> list:
    """``[(t_ms or None, state), ...]`` for the exact-simulation scenarios."""
    if cfg.state == "from_file":
        raise ConfigError("state: from_file has no exact state (only recorded datasets)")
    if cfg.state == "ghz":
        states = [(None, make_ghz(cfg.n_qubits))]
    elif cfg.state == "neel_quench":
        spectrum = diagonalize(build_hamiltonian(cfg.hamiltonian))
        neel = make_neel(cfg.n_qubits)
        states = [(t_ms, evolve(neel, spectrum, t_ms * 1e-3)) for t_ms in cfg.times_ms]
    elif cfg.state == "tfim_ground":
        states = [(None, ground_state(build_hamiltonian(cfg.hamiltonian)).state)]
    else:
        states = [(None, _werner_qubit_state(cfg.werner))]
    if cfg.depolarize_strength > 0:
        out = []
        for t_ms, st in states:
            rho = st.density_matrix() if isinstance(st, PureState) else st
            out.append((t_ms, depolarize(rho, cfg.depolarize_strength)))
        states = out
    return states


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg: ScenarioConfig, config_digest: Optional[str] = None, emit_plot_data: bool = False) -> OutputSet:
    """One dataset per time (or one for static states) over the union of partition sites."""
    out = OutputSet(cfg.output_dir, "simulate", cfg, config_digest)
    sites = cfg.measured_sites
    for idx, (t_ms, state) in enumerate(scenario_states(cfg)):
        seed = derive_seed(cfg.seed, idx)
        ds = generate_dataset(state, sites, cfg.m, p=cfg.p, ensemble=cfg.ensemble, seed=seed)
        name = "dataset.jsonl" if t_ms is None else f"dataset_t{_fmt_ms(t_ms)}ms.jsonl"
        write_dataset(ds, out.path(name))
        out.register(name, kind="dataset", seed=seed, t_ms=t_ms, sites=list(sites), m=cfg.m, p=cfg.p)
    out.finish()
    return out


def _dataset_inputs(cfg: ScenarioConfig, paths) -> list:
    """``[(path, t_ms), ...]`` from explicit paths, config, or the simulate manifest."""
    if paths:
        return [(Path(p), None) for p in paths]
    if cfg.dataset_files:
        return [(Path(p), None) for p in cfg.dataset_files]
    manifest = cfg.output_dir / "manifest-simulate.json"
    if not manifest.exists():
        raise ConfigError(f"dataset_files: none given and {manifest} does not exist")
    entries = json.loads(manifest.read_text(encoding="utf-8"))["files"]
    return [(cfg.output_dir / e["name"], e.get("t_ms")) for e in entries if e.get("kind") == "dataset"]


def _statistic_with_replicates(snaps, partition, statistic, route):
    """``(value, std_error, loo)``; ``loo`` is None when M is too small for a jackknife."""
    try:
        value, loo = jackknife_values(snaps, partition, statistic, route)
    except InsufficientDataError:
        est = estimate(snaps, partition, statistic, route=route, with_error=False)
        return est.value, float("nan"), None
    m = loo.shape[0]
    mean = math.fsum(loo) / m
    err = math.sqrt((m - 1) / m * math.fsum((loo - mean) ** 2))
    return float(value), err, loo


def _derived_record(name, func, inputs, base, domain_ok):
    """Ratio or R3 record; values outside the domain become the ``undefined`` marker."""
    full = [v for v, _ in inputs]
    rec = dict(base, statistic=name)
    if not domain_ok(*full):
        rec.update(value=UNDEFINED, std_error=None, method="derived", note="non-positive p3 or s3")
        return rec
    loos = [loo for _, loo in inputs]
    if any(loo is None for loo in loos):
        rec.update(value=func(*full), std_error=None, method="derived", note="too few records for jackknife")
        return rec
    if not all(domain_ok(*vals) for vals in zip(*loos)):
        rec.update(value=func(*full), std_error=None, method="derived", note="jackknife replicate outside domain")
        return rec
    value, err = jackknife_derived(func, full, loos)
    rec.update(value=value, std_error=err, method="jackknife-derived")
    return rec


def cmd_estimate(
    cfg: ScenarioConfig, paths=(), config_digest: Optional[str] = None, emit_plot_data: bool = False
) -> OutputSet:
    """One record per (dataset, partition, statistic), plus p2^2/p3 and R3 when their inputs exist."""
    out = OutputSet(cfg.output_dir, "estimate", cfg, config_digest)
    inputs = _dataset_inputs(cfg, paths)
    if not cfg.partitions:
        raise ConfigError("partitions: at least one partition is required for estimation")
    records = []
    for path, t_ms in inputs:
        ds = read_dataset(path)
        snaps = snapshots_from_dataset(ds)
        for part in cfg.partitions:
            base = {
                "dataset": path.name,
                "t_ms": t_ms,
                "partition": {"A": list(part.a_sites), "B": list(part.b_sites)},
                "m": ds.m,
                "p": ds.p,
                "seed": ds.seed,
            }
            found = {}
            for stat in cfg.statistics:
                value, err, loo = _statistic_with_replicates(snaps, part, stat, cfg.route)
                found[stat] = (value, loo)
                est = Estimate(value, err, "u-statistic", ds.m, ds.p, stat, part, seed=ds.seed)
                records.append(est.to_record(dataset=path.name, t_ms=t_ms))
            if "p2" in found and "p3" in found:
                records.append(
                    _derived_record(RATIO, lambda a, b: a * a / b, [found["p2"], found["p3"]], base, lambda a, b: b > 0)
                )
            if "p3" in found and "s3" in found:
                records.append(
                    _derived_record(R3, r3_ratio, [found["p3"], found["s3"]], base, lambda a, b: a > 0 and b > 0)
                )
    records = [{k: _json_value(v) for k, v in rec.items()} for rec in records]
    out.write_jsonl("estimates.jsonl", records, kind="results")
    rows = [_flat_estimate(r) for r in records]
    out.write_csv("estimates.csv", rows, _ESTIMATE_COLUMNS, kind="table")
    if emit_plot_data:
        _estimate_plot_data(out, rows)
    out.finish()
    return out


def _flat_estimate(rec: dict) -> dict:
    row = {k: rec.get(k) for k in _ESTIMATE_COLUMNS}
    part = rec.get("partition") or {}
    row["A"] = part.get("A")
    row["B"] = part.get("B")
    return row


def _estimate_plot_data(out: OutputSet, rows: list):
    cols = ("t_ms", "A", "B", "value", "std_error")
    bundles = {"fig1c.csv": RATIO, "fig3.csv": None, "fig4a.csv": R3}
    for name, stat in bundles.items():
        if stat is None:
            sel = [r for r in rows if r["statistic"] in ("p2", "p3")]
            out.write_csv(name, sel, ("statistic",) + cols, kind="plot-data")
        else:
            sel = [r for r in rows if r["statistic"] == stat]
            out.write_csv(name, sel, cols, kind="plot-data")


_COMPARE_COLUMNS = (
    "t_ms",
    "A",
    "B",
    "negativity",
    "p2",
    "p3",
    "p3_ppt_margin",
    "purity_gap",
    "ppt_violated",
    "p3_ppt_violated",
    "purity_condition_met",
)


def cmd_compare(cfg: ScenarioConfig, config_digest: Optional[str] = None, emit_plot_data: bool = False) -> OutputSet:
    """Exact negativity, p3-PPT margin and purity gap per (time, partition)."""
    if cfg.state == "from_file":
        raise ConfigError("state: compare needs an exact state; from_file is unsupported")
    if not cfg.partitions:
        raise ConfigError("partitions: at least one partition is required for compare")
    out = OutputSet(cfg.output_dir, "compare", cfg, config_digest)
    records = []
    for t_ms, state in scenario_states(cfg):
        for part in cfg.partitions:
            rho = reduced_density_matrix(state, part.ab_sites)
            report = compare_conditions(rho, part)
            records.append(report.to_record(t_ms=t_ms, A=list(part.a_sites), B=list(part.b_sites)))
    out.write_jsonl("compare.jsonl", records, kind="results")
    out.write_csv("compare.csv", records, _COMPARE_COLUMNS, kind="table")
    if emit_plot_data:
        out.write_csv("fig6.csv", records, _COMPARE_COLUMNS, kind="plot-data")
    out.finish()
    return out


_SWEEP_COLUMNS = ("M", "mean_abs_err", "stderr", "trials")


def _sweep_state(cfg: ScenarioConfig, ab_size: int):
    if cfg.state == "ghz":
        return make_ghz(ab_size), "ghz"
    if cfg.state == "tfim_ground":
        n = max(cfg.n_qubits, ab_size)
        ham = replace(cfg.hamiltonian, n_qubits=n)
        return ground_state(build_hamiltonian(ham)).state, "tfim"
    raise ConfigError(f"state: sweeps support ghz and tfim_ground, not {cfg.state}")


def cmd_sweep(cfg: ScenarioConfig, config_digest: Optional[str] = None, emit_plot_data: bool = False) -> OutputSet:
    """One error-scaling table per (statistic, |AB|) with fitted log-log slopes."""
    sw = cfg.sweep
    for size in sw.ab_sizes:
        if size > MAX_SWEEP_SITES:
            raise ResourceLimitError(f"sweep.ab_sizes: |AB|={size} exceeds {MAX_SWEEP_SITES}")
    out = OutputSet(cfg.output_dir, "sweep", cfg, config_digest)
    summary = []
    plot_rows = {}
    for k, size in enumerate(sw.ab_sizes):
        state, label = _sweep_state(cfg, size)
        part = half_partition(size)
        for j, stat in enumerate(sw.statistics):
            seed = derive_seed(cfg.seed, k, j)
            result = error_scaling_sweep(
                state, part, stat, sw.grid_for(size), sw.trials, seed, ensemble=cfg.ensemble, p=sw.p, state_label=label
            )
            name = f"sweep_{label}_{stat}_ab{size}.csv"
            out.write_csv(name, result.table(), _SWEEP_COLUMNS, kind="table", seed=seed)
            summary.append(
                {
                    "state": label,
                    "statistic": stat,
                    "ab_size": size,
                    "partition": part.label(),
                    "seed": seed,
                    "slope_lower": result.fitted_slopes["lower"],
                    "slope_upper": result.fitted_slopes["upper"],
                    "table": name,
                }
            )
            for row in result.table():
                plot_rows.setdefault((label, stat), []).append(dict(row, ab_size=size))
    out.write_json("sweep_summary.json", summary, kind="summary")
    if emit_plot_data:
        fig = {("ghz", "p2"): "fig2a.csv", ("ghz", "p3"): "fig2b.csv", ("tfim", "p2"): "fig7a.csv", ("tfim", "p3"): "fig7b.csv"}
        for key, rows in plot_rows.items():
            name = fig.get(key, f"fig_{key[0]}_{key[1]}.csv")
            out.write_csv(name, rows, ("ab_size",) + _SWEEP_COLUMNS, kind="plot-data")
    out.finish()
    return out


_WERNER_COLUMNS = ("d", "alpha", "p2", "p3", "ppt_violated", "p3_ppt_violated", "agree")


def cmd_werner(cfg: ScenarioConfig, config_digest: Optional[str] = None, emit_plot_data: bool = False) -> OutputSet:
    """Closed-form Werner moments and verdicts on an alpha grid, with the p3 root."""
    w = cfg.werner
    out = OutputSet(cfg.output_dir, "werner", cfg, config_digest)
    sweep = werner_equivalence_sweep(w.d, w.alpha_grid)
    witness = werner_r3_nonmonotone_check(w.d)
    table = sweep.table()
    out.write_csv(f"werner_d{w.d}.csv", table, _WERNER_COLUMNS, kind="table")
    summary = {
        "d": w.d,
        "points": len(table),
        "alpha_star": sweep.alpha_star,
        "equivalent": not sweep.disagreements,
        "disagreements": sweep.disagreements,
        "r3_witness": None
        if witness is None
        else {"alpha": witness.alpha, "p3": witness.p3, "s3": witness.s3, "r3": witness.r3},
    }
    out.write_json(f"werner_d{w.d}_summary.json", summary, kind="summary")
    if emit_plot_data:
        out.write_csv(f"fig_werner_d{w.d}.csv", table, ("alpha", "p2", "p3"), kind="plot-data")
    out.finish()
    return out


# ---------------------------------------------------------------------------
# argument handling

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ptmoments", description="PT-moment estimation from randomized measurements.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        p.add_argument("--config", type=Path, required=needs_config, help="TOML scenario file")
        p.add_argument("--m", type=int, help="override number of measurement records")
        p.add_argument("--p", type=int, help="override shots per record")
        p.add_argument("--seed", type=int, help="override master seed")
        p.add_argument("--out", type=Path, help="override output directory")
        p.add_argument("--emit-plot-data", action="store_true", help="also write per-figure CSV bundles")

    common(sub.add_parser("simulate", help="generate measurement datasets"))
    est = sub.add_parser("estimate", help="estimate PT-moments from datasets")
    common(est)
    est.add_argument("datasets", nargs="*", type=Path, help="dataset files (default: simulate manifest)")
    common(sub.add_parser("compare", help="exact entanglement conditions"))
    common(sub.add_parser("sweep", help="Monte Carlo error-scaling sweeps"))
    wer = sub.add_parser("werner", help="Werner-state equivalence report")
    common(wer, needs_config=False)
    wer.add_argument("--d", type=int, help="local dimension (2..8)")
    wer.add_argument("--alpha-points", type=int, help="number of evenly spaced alpha values in [0, 1]")
    return parser


def _resolve_config(args) -> tuple:
    if args.config is None:
        cfg, digest = config_from_dict({"state": "werner"}), None
    else:
        cfg = load_config(args.config)
        digest = _sha256(args.config)
    overrides = {}
    for name in ("m", "p", "seed"):
        value = getattr(args, name)
        if value is not None:
            if value < (0 if name == "seed" else 1):
                raise ConfigError(f"--{name}: invalid value {value}")
            overrides[name] = value
    if args.out is not None:
        overrides["output_dir"] = args.out
    if getattr(args, "d", None) is not None or getattr(args, "alpha_points", None) is not None:
        w = cfg.werner
        if args.d is not None:
            if not 2 <= args.d <= 8:
                raise ConfigError(f"--d: must lie in [2, 8], got {args.d}")
            w = replace(w, d=args.d)
        if args.alpha_points is not None:
            if args.alpha_points < 2:
                raise ConfigError(f"--alpha-points: must be >= 2, got {args.alpha_points}")
            n = args.alpha_points
            w = replace(w, alpha_grid=tuple(k / (n - 1) for k in range(n)))
        overrides["werner"] = w
    if overrides:
        cfg = replace(cfg, **overrides)
    return cfg, digest


def run(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg, digest = _resolve_config(args)
        plots = bool(args.emit_plot_data)
        with threadpool_limits(limits=1):
            if args.command == "simulate":
                out = cmd_simulate(cfg, digest, plots)
            elif args.command == "estimate":
                out = cmd_estimate(cfg, args.datasets, digest, plots)
            elif args.command == "compare":
                out = cmd_compare(cfg, digest, plots)
            elif args.command == "sweep":
                out = cmd_sweep(cfg, digest, plots)
            else:
                out = cmd_werner(cfg, digest, plots)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ResourceLimitError as exc:
        print(f"resource limit: {exc}", file=sys.stderr)
        return EXIT_RESOURCE
    except (PtMomentsError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    for entry in out.entries:
        print(out.path(entry["name"]))
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
