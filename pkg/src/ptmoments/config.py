"""Scenario configuration: TOML parsing, validation and partition grammar.

Physical units are carried in key names (``t_ms``, ``j0_per_s``). Sites are
1-based. Example::

    state = "neel_quench"
    n_qubits = 8
    m = 500
    p = 150
    seed = 7
    times_ms = [0.0, 0.5, 1.0]
    partitions = ["A=1-2;B=3-4", "A=1;B=3,5"]
    statistics = ["p2", "p3", "s3"]

    [hamiltonian]
    model = "xy"
    j0_per_s = 420.0
    alpha = 1.24
"""

from __future__ import annotations

import math
import re
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError, PtMomentsError
from .qstate import HamiltonianSpec, PartitionSpec

STATES = ("ghz", "neel_quench", "tfim_ground", "werner", "from_file")
ENSEMBLES = ("clifford", "haar")
STATISTIC_NAMES = ("p2", "p3", "s3", "p4")
DEFAULT_TIMES_MS = tuple(0.5 * k for k in range(11))

_TOP_KEYS = {
    "state",
    "n_qubits",
    "m",
    "p",
    "seed",
    "ensemble",
    "times_ms",
    "partitions",
    "statistics",
    "depolarize_strength",
    "output_dir",
    "dataset_files",
    "route",
    "hamiltonian",
    "sweep",
    "werner",
}
_HAM_KEYS = {"model", "j0_per_s", "alpha", "b_field_per_s", "j_tfim"}
_SWEEP_KEYS = {"statistics", "ab_sizes", "m_grid", "trials", "p"}
_WERNER_KEYS = {"d", "alpha", "alpha_grid", "alpha_points"}
_RANGE = re.compile(r"^(\d+)(?:-(\d+))?$")


def parse_sites(text: str, field_name: str = "partition") -> tuple:
    """``"1-3,7"`` -> ``(1, 2, 3, 7)``."""
    sites = []
    for chunk in text.split(","):
        match = _RANGE.match(chunk.strip())
        if not match:
            raise ConfigError(f"{field_name}: malformed site range {chunk.strip()!r}")
        lo = int(match.group(1))
        hi = int(match.group(2) or lo)
        if lo < 1 or hi < lo:
            raise ConfigError(f"{field_name}: invalid range {chunk.strip()!r}")
        sites.extend(range(lo, hi + 1))
    return tuple(sites)


def parse_partition(text: str, field_name: str = "partition") -> PartitionSpec:
    """Parse ``A=1-3;B=7-9``; comma lists allow disconnected parts (``B=3,5-6``)."""
    parts = {}
    for piece in str(text).split(";"):
        if "=" not in piece:
            raise ConfigError(f"{field_name}: expected 'A=...;B=...', got {text!r}")
        key, _, value = piece.partition("=")
        key = key.strip().upper()
        if key not in ("A", "B") or key in parts:
            raise ConfigError(f"{field_name}: expected 'A=...;B=...', got {text!r}")
        parts[key] = parse_sites(value, field_name)
    if set(parts) != {"A", "B"}:
        raise ConfigError(f"{field_name}: both A and B are required, got {text!r}")
    try:
        return PartitionSpec(parts["A"], parts["B"])
    except PtMomentsError as exc:
        raise ConfigError(f"{field_name}: {exc}") from None


def half_partition(ab_size: int, offset: int = 0) -> PartitionSpec:
    """Adjacent halves ``A = first floor(|AB|/2)`` sites, ``B`` = the rest."""
    half = ab_size // 2
    return PartitionSpec(
        tuple(range(offset + 1, offset + half + 1)), tuple(range(offset + half + 1, offset + ab_size + 1))
    )


@dataclass(frozen=True)
class SweepConfig:
    statistics: tuple = ("p2", "p3")
    ab_sizes: tuple = (2, 4, 6)
    m_grid: Optional[tuple] = None  # default: 2^|AB| * (10, 20, 50, 100, 200)
    trials: int = 50
    p: int = 1

    def grid_for(self, ab_size: int) -> tuple:
        if self.m_grid is not None:
            return self.m_grid
        return tuple(f * 2**ab_size for f in (10, 20, 50, 100, 200))


@dataclass(frozen=True)
class WernerConfig:
    d: int = 4
    alpha: float = 0.0
    alpha_grid: tuple = tuple(k / 100 for k in range(101))


@dataclass(frozen=True)
class ScenarioConfig:
    state: str
    n_qubits: int = 4
    m: int = 100
    p: int = 1
    seed: int = 0
    ensemble: str = "clifford"
    times_ms: tuple = ()
    partitions: tuple = ()
    statistics: tuple = ("p2", "p3", "s3")
    depolarize_strength: float = 0.0
    output_dir: Path = Path("out")
    dataset_files: tuple = ()
    route: str = "auto"
    hamiltonian: Optional[HamiltonianSpec] = None
    sweep: SweepConfig = field(default_factory=SweepConfig)
    werner: WernerConfig = field(default_factory=WernerConfig)

    @property
    def times(self) -> tuple:
        """Evolution times in seconds."""
        return tuple(t * 1e-3 for t in self.times_ms)

    @property
    def measured_sites(self) -> tuple:
        """Union of all partition sites, or every site when no partition is given."""
        if not self.partitions:
            return tuple(range(1, self.n_sites + 1))
        return tuple(sorted({s for part in self.partitions for s in part.ab_sites}))

    @property
    def n_sites(self) -> int:
        if self.state == "werner":
            return 2 * int(round(math.log2(self.werner.d)))
        return self.n_qubits


def _type_error(name, expected, value):
    return ConfigError(f"{name}: expected {expected}, got {value!r}")


def _int(raw, name, lo=None):
    if isinstance(raw, bool) or not isinstance(raw, int):
        raise _type_error(name, "an integer", raw)
    if lo is not None and raw < lo:
        raise ConfigError(f"{name}: must be >= {lo}, got {raw}")
    return int(raw)


def _float(raw, name):
    if isinstance(raw, bool) or not isinstance(raw, (int, float)) or not math.isfinite(raw):
        raise _type_error(name, "a finite number", raw)
    return float(raw)


def _list(raw, name):
    if not isinstance(raw, list):
        raise _type_error(name, "a list", raw)
    return raw


def _choice(raw, name, options):
    if raw not in options:
        raise ConfigError(f"{name}: must be one of {', '.join(options)}; got {raw!r}")
    return raw


def _check_keys(table, allowed, where):
    unknown = sorted(set(table) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")


def _statistics(raw, name):
    stats = tuple(_choice(s, name, STATISTIC_NAMES) for s in _list(raw, name))
    if not stats or len(set(stats)) != len(stats):
        raise ConfigError(f"{name}: must be a nonempty list without duplicates")
    return stats


def _hamiltonian(table, state, n_qubits) -> Optional[HamiltonianSpec]:
    if table is None:
        table = {}
    if not isinstance(table, dict):
        raise _type_error("hamiltonian", "a table", table)
    _check_keys(table, _HAM_KEYS, "hamiltonian")
    default_model = "tfim" if state == "tfim_ground" else "xy"
    model = _choice(str(table.get("model", default_model)).lower(), "hamiltonian.model", ("xy", "tfim"))
    try:
        return HamiltonianSpec(
            model,
            n_qubits,
            j0=_float(table.get("j0_per_s", 420.0), "hamiltonian.j0_per_s"),
            alpha=_float(table.get("alpha", 1.24), "hamiltonian.alpha"),
            b_field=_float(table.get("b_field_per_s", 0.0), "hamiltonian.b_field_per_s"),
            j_tfim=_float(table.get("j_tfim", 1.0), "hamiltonian.j_tfim"),
        )
    except PtMomentsError as exc:
        raise ConfigError(f"hamiltonian: {exc}") from None


def _sweep(table) -> SweepConfig:
    if not isinstance(table, dict):
        raise _type_error("sweep", "a table", table)
    _check_keys(table, _SWEEP_KEYS, "sweep")
    out = SweepConfig()
    if "statistics" in table:
        stats = _statistics(table["statistics"], "sweep.statistics")
        bad = [s for s in stats if s not in ("p2", "p3", "s3")]
        if bad:
            raise ConfigError(f"sweep.statistics: unsupported {bad}")
        out = replace(out, statistics=stats)
    if "ab_sizes" in table:
        sizes = tuple(_int(v, "sweep.ab_sizes", lo=2) for v in _list(table["ab_sizes"], "sweep.ab_sizes"))
        if not sizes:
            raise ConfigError("sweep.ab_sizes: must be nonempty")
        out = replace(out, ab_sizes=sizes)
    if "m_grid" in table:
        grid = tuple(_int(v, "sweep.m_grid", lo=2) for v in _list(table["m_grid"], "sweep.m_grid"))
        if not grid or any(b <= a for a, b in zip(grid, grid[1:])):
            raise ConfigError("sweep.m_grid: must be a nonempty, strictly increasing list")
        out = replace(out, m_grid=grid)
    if "trials" in table:
        out = replace(out, trials=_int(table["trials"], "sweep.trials", lo=10))
    if "p" in table:
        out = replace(out, p=_int(table["p"], "sweep.p", lo=1))
    return out


def _werner(table) -> WernerConfig:
    if not isinstance(table, dict):
        raise _type_error("werner", "a table", table)
    _check_keys(table, _WERNER_KEYS, "werner")
    out = WernerConfig()
    if "d" in table:
        d = _int(table["d"], "werner.d", lo=2)
        if d > 8:
            raise ConfigError(f"werner.d: must lie in [2, 8], got {d}")
        out = replace(out, d=d)
    if "alpha" in table:
        alpha = _float(table["alpha"], "werner.alpha")
        if not 0.0 <= alpha <= 1.0:
            raise ConfigError(f"werner.alpha: must lie in [0, 1], got {alpha}")
        out = replace(out, alpha=alpha)
    if "alpha_grid" in table and "alpha_points" in table:
        raise ConfigError("werner: give alpha_grid or alpha_points, not both")
    if "alpha_grid" in table:
        grid = tuple(_float(v, "werner.alpha_grid") for v in _list(table["alpha_grid"], "werner.alpha_grid"))
        if not grid or any(not 0.0 <= a <= 1.0 for a in grid):
            raise ConfigError("werner.alpha_grid: values must lie in [0, 1]")
        out = replace(out, alpha_grid=grid)
    if "alpha_points" in table:
        n = _int(table["alpha_points"], "werner.alpha_points", lo=2)
        out = replace(out, alpha_grid=tuple(k / (n - 1) for k in range(n)))
    return out


def config_from_dict(raw: dict, base_dir: Path = Path(".")) -> ScenarioConfig:
    """Validate a parsed config table; errors name the offending field."""
    if not isinstance(raw, dict):
        raise ConfigError("config: expected a table")
    _check_keys(raw, _TOP_KEYS, "config")
    if "state" not in raw:
        raise ConfigError("state: missing required key")
    state = _choice(raw["state"], "state", STATES)
    kw = {"state": state}
    default_n = 4
    n = _int(raw.get("n_qubits", default_n), "n_qubits", lo=1)
    kw["n_qubits"] = n
    if "m" in raw:
        kw["m"] = _int(raw["m"], "m", lo=1)
    if "p" in raw:
        kw["p"] = _int(raw["p"], "p", lo=1)
    if "seed" in raw:
        kw["seed"] = _int(raw["seed"], "seed", lo=0)
    if "ensemble" in raw:
        kw["ensemble"] = _choice(raw["ensemble"], "ensemble", ENSEMBLES)
    if "route" in raw:
        kw["route"] = _choice(raw["route"], "route", ("auto", "factorized", "dense"))
    if "statistics" in raw:
        kw["statistics"] = _statistics(raw["statistics"], "statistics")
    if "depolarize_strength" in raw:
        strength = _float(raw["depolarize_strength"], "depolarize_strength")
        if not 0.0 <= strength <= 1.0:
            raise ConfigError(f"depolarize_strength: must lie in [0, 1], got {strength}")
        kw["depolarize_strength"] = strength
    if "output_dir" in raw:
        if not isinstance(raw["output_dir"], str) or not raw["output_dir"]:
            raise _type_error("output_dir", "a path string", raw["output_dir"])
        kw["output_dir"] = base_dir / raw["output_dir"]
    if "dataset_files" in raw:
        files = _list(raw["dataset_files"], "dataset_files")
        if not all(isinstance(f, str) for f in files):
            raise ConfigError("dataset_files: expected a list of path strings")
        kw["dataset_files"] = tuple(base_dir / f for f in files)

    if state == "neel_quench":
        times = raw.get("times_ms", list(DEFAULT_TIMES_MS))
        times = tuple(_float(t, "times_ms") for t in _list(times, "times_ms"))
        if not times:
            raise ConfigError("times_ms: must be nonempty for quench scenarios")
        if any(t < 0 for t in times):
            raise ConfigError("times_ms: times must be non-negative")
        if len(set(times)) != len(times):
            raise ConfigError("times_ms: duplicate times")
        kw["times_ms"] = times
    elif "times_ms" in raw:
        raise ConfigError(f"times_ms: only meaningful for neel_quench, not {state}")

    if state in ("neel_quench", "tfim_ground"):
        if n < 2:
            raise ConfigError("n_qubits: must be >= 2 for Hamiltonian scenarios")
        kw["hamiltonian"] = _hamiltonian(raw.get("hamiltonian"), state, n)
        expected = "XY" if state == "neel_quench" else "TFIM"
        if kw["hamiltonian"].model != expected:
            raise ConfigError(f"hamiltonian.model: {state} requires {expected.lower()}")
    elif "hamiltonian" in raw:
        raise ConfigError(f"hamiltonian: not used by state {state}")

    if "sweep" in raw:
        kw["sweep"] = _sweep(raw["sweep"])
    if "werner" in raw:
        kw["werner"] = _werner(raw["werner"])
    if state == "werner" and "n_qubits" in raw:
        raise ConfigError("n_qubits: Werner scenarios are sized by werner.d")
    if state == "from_file" and not kw.get("dataset_files"):
        raise ConfigError("dataset_files: required when state is from_file")

    cfg = ScenarioConfig(**kw)
    if "partitions" in raw:
        parts = []
        for i, text in enumerate(_list(raw["partitions"], "partitions")):
            if not isinstance(text, str):
                raise _type_error(f"partitions[{i}]", "a string", text)
            parts.append(parse_partition(text, f"partitions[{i}]"))
        cfg = replace(cfg, partitions=tuple(parts))
    elif state == "werner":
        cfg = replace(cfg, partitions=(_werner_partition(cfg.werner.d),))
    if state != "from_file":
        limit = cfg.n_sites
        for i, part in enumerate(cfg.partitions):
            outside = [s for s in part.ab_sites if s > limit]
            if outside:
                raise ConfigError(f"partitions[{i}]: sites {outside} exceed n_qubits={limit}")
    return cfg


def _werner_partition(d: int) -> PartitionSpec:
    k = int(round(math.log2(d))) if d >= 2 and d & (d - 1) == 0 else 1
    return PartitionSpec(tuple(range(1, k + 1)), tuple(range(k + 1, 2 * k + 1)))


def load_config(path) -> ScenarioConfig:
    """Read and validate a TOML scenario file; relative paths resolve against its directory."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config: file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config: {exc}") from None
    return config_from_dict(raw, base_dir=path.parent)
