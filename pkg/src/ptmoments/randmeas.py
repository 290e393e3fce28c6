"""Local random unitaries, Born-rule sampling and measurement datasets.

Each record of a dataset holds one local unitary ``u = u_1 x ... x u_|AB|`` and
``P`` computational-basis outcomes drawn after applying it. Records are
generated from counter-based Philox substreams (key ``seed``, record index in
a high counter word), so any single record can be regenerated on its own.

Dataset files are line-delimited JSON: a header object followed by one object
per record (see :func:`write_dataset`).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence, Union

import numpy as np

from .errors import DatasetFormatError, InvalidArgumentError, ResourceLimitError, ValidationError
from .qstate import DensityMatrix, PureState, reduced_density_matrix

ENSEMBLES = ("clifford", "haar", "external")
MAX_MEASURED_SITES = 14
FORMAT_VERSION = 1
_UNITARY_TOL = 1e-6
_SEED_MASK = (1 << 64) - 1

_S = np.array([[1, 0], [0, 1j]])
_H = np.array([[1, 1], [1, -1]]) / np.sqrt(2)
_X = np.array([[0, 1], [1, 0]], dtype=complex)
_I = np.eye(2, dtype=complex)


def _clifford_table() -> np.ndarray:
    # Element 4*b + a is V_b S^a. V_b sends the Z axis to +Z, -Z, +X, -X, +Y, -Y
    # and S^a (a = 0..3) runs over the rotations fixing Z, so the 24 products
    # are the single-qubit Clifford group modulo global phase.
    cosets = [_I, _X, _H, _H @ _X, _S @ _H, _S @ _H @ _X]
    table = []
    for v in cosets:
        for a in range(4):
            table.append(v @ np.linalg.matrix_power(_S, a))
    out = np.array(table, dtype=complex)
    out.setflags(write=False)
    return out


CLIFFORDS = _clifford_table()


@dataclass(frozen=True)
class LocalUnitary:
    per_qubit: np.ndarray  # (n_sites, 2, 2)

    def __post_init__(self):
        u = np.asarray(self.per_qubit, dtype=complex).reshape(-1, 2, 2)
        object.__setattr__(self, "per_qubit", u)

    def __len__(self):
        return self.per_qubit.shape[0]

    def is_unitary(self, tol: float = 1e-10) -> bool:
        return _unitarity_defect(self.per_qubit) <= tol


@dataclass(frozen=True)
class MeasurementRecord:
    unitary: LocalUnitary
    outcomes: tuple  # P bitstrings, character j <-> sites[j]
    sites: tuple = ()


class MeasurementDataset:
    """``M`` records of (local unitary, ``P`` outcome bitstrings) on ``site_list``.

    Stored column-wise: ``unitaries`` is ``(M, |AB|, 2, 2)`` complex and
    ``outcomes`` is ``(M, P, |AB|)`` uint8. :attr:`records` gives the row view.
    """

    def __init__(self, n_sites, site_list, ensemble, seed, unitaries, outcomes):
        self.n_sites = int(n_sites)
        self.site_list = tuple(int(s) for s in site_list)
        self.ensemble = str(ensemble)
        self.seed = int(seed)
        self.unitaries = np.asarray(unitaries, dtype=complex)
        self.outcomes = np.asarray(outcomes, dtype=np.uint8)
        if self.ensemble not in ENSEMBLES:
            raise InvalidArgumentError(f"unknown ensemble {self.ensemble!r}")
        m, n = self.unitaries.shape[:2]
        if m < 1:
            raise InvalidArgumentError("dataset needs at least one record")
        if n != len(self.site_list) or self.outcomes.shape[0] != m or self.outcomes.shape[2] != n:
            raise InvalidArgumentError("inconsistent record shapes")
        if self.outcomes.shape[1] < 1:
            raise InvalidArgumentError("need at least one shot per unitary")

    @property
    def m(self) -> int:
        return self.unitaries.shape[0]

    @property
    def p(self) -> int:
        return self.outcomes.shape[1]

    @property
    def records(self) -> list:
        return [
            MeasurementRecord(LocalUnitary(u), tuple(_bitstring(k) for k in ks), self.site_list)
            for u, ks in zip(self.unitaries, self.outcomes)
        ]

    def __eq__(self, other):
        if not isinstance(other, MeasurementDataset):
            return NotImplemented
        return (
            self.n_sites == other.n_sites
            and self.site_list == other.site_list
            and self.ensemble == other.ensemble
            and self.seed == other.seed
            and np.array_equal(self.unitaries, other.unitaries)
            and np.array_equal(self.outcomes, other.outcomes)
        )

    def subset(self, indices) -> "MeasurementDataset":
        idx = np.asarray(indices)
        return MeasurementDataset(
            self.n_sites, self.site_list, self.ensemble, self.seed,
            self.unitaries[idx], self.outcomes[idx],
        )


def _bitstring(bits) -> str:
    return "".join("1" if b else "0" for b in bits)


def _unitarity_defect(us: np.ndarray) -> float:
    us = us.reshape(-1, 2, 2)
    prod = np.einsum("nji,njk->nik", us.conj(), us)
    return float(np.abs(prod - np.eye(2)).max()) if us.size else 0.0


# ---------------------------------------------------------------------------
# sampling


def record_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based substream for record ``index``.

    The index occupies counter word 2, so streams of different records (and of
    different seeds, through the key) never overlap.
    """
    return np.random.Generator(np.random.Philox(key=int(seed) & _SEED_MASK, counter=int(index) << 128))


class _RecordStreams:
    """Reusable generator that is repositioned onto ``record_rng(seed, index)``.

    Setting the Philox state is several times cheaper than building a new
    generator per record; the streams are identical.
    """

    def __init__(self, seed: int):
        self._bitgen = np.random.Philox(key=int(seed) & _SEED_MASK)
        self._gen = np.random.Generator(self._bitgen)
        self._key = self._bitgen.state["state"]["key"].copy()

    def __call__(self, index: int) -> np.random.Generator:
        self._bitgen.state = {
            "bit_generator": "Philox",
            "state": {"counter": np.array([0, 0, index, 0], dtype=np.uint64), "key": self._key},
            "buffer": np.zeros(4, dtype=np.uint64),
            "buffer_pos": 4,
            "has_uint32": 0,
            "uinteger": 0,
        }
        return self._gen


def sample_single_qubit_clifford(rng: np.random.Generator) -> np.ndarray:
    return CLIFFORDS[rng.integers(len(CLIFFORDS))].copy()


def sample_haar_su2(rng: np.random.Generator) -> np.ndarray:
    """Haar-random 2x2 unitary from a normalized complex Gaussian pair."""
    z = rng.normal(size=2) + 1j * rng.normal(size=2)
    a, b = z / np.linalg.norm(z)
    return np.array([[a, -b.conjugate()], [b, a.conjugate()]])


def _record_draws(rng, n, p, ensemble):
    """Unitaries and ``p`` outcome uniforms of one record, in stream order."""
    if ensemble == "clifford":
        x = rng.random(n + p)
        return CLIFFORDS[(x[:n] * len(CLIFFORDS)).astype(np.intp)], x[n:]
    return _sample_unitaries(rng, n, ensemble), rng.random(p)


def _sample_unitaries(rng, n, ensemble):
    if ensemble == "clifford":
        return CLIFFORDS[rng.integers(len(CLIFFORDS), size=n)]
    if ensemble == "haar":
        return np.array([sample_haar_su2(rng) for _ in range(n)])
    raise InvalidArgumentError(f"cannot sample from ensemble {ensemble!r}")


def _apply_local(psi: np.ndarray, us: np.ndarray) -> np.ndarray:
    """Apply ``us[j]`` to axis ``j + 1`` of a batch ``psi`` of shape (B, 2, ..., 2, R)."""
    for j in range(us.shape[1]):
        psi = np.moveaxis(np.einsum("bij,bj...->bi...", us[:, j], np.moveaxis(psi, j + 1, 1)), 1, j + 1)
    return psi


def _outcome_probabilities(state, sites, us: np.ndarray) -> np.ndarray:
    """Born probabilities for a batch of local unitaries ``us`` of shape (B, n, 2, 2)."""
    n = len(sites)
    batch = us.shape[0]
    if isinstance(state, PureState):
        nq = state.n_qubits
        keep = [s - 1 for s in sites]
        rest = [i for i in range(nq) if i not in keep]
        psi = state.amplitudes.reshape((2,) * nq).transpose(keep + rest).reshape((2,) * n + (-1,))
        psi = np.broadcast_to(psi, (batch,) + psi.shape)
        psi = _apply_local(psi, us)
        probs = np.sum(np.abs(psi) ** 2, axis=-1).reshape(batch, 2**n)
    else:
        rho = state if tuple(state.sites) == tuple(sites) else reduced_density_matrix(state, sites)
        mat = rho.matrix.reshape((2,) * (2 * n))
        # rho' = u rho u^dagger; probabilities are its diagonal
        t = np.broadcast_to(mat, (batch,) + mat.shape)
        t = _apply_local(t, us)
        t = np.moveaxis(t, list(range(n + 1, 2 * n + 1)), list(range(1, n + 1)))
        t = _apply_local(t, us.conj())
        t = np.moveaxis(t, list(range(1, n + 1)), list(range(n + 1, 2 * n + 1)))
        t = t.reshape(batch, 2**n, 2**n)
        probs = np.real(np.einsum("bii->bi", t))
    probs = np.clip(probs, 0.0, None)
    return probs / probs.sum(axis=1, keepdims=True)


def _check_sites(state, sites):
    sites = tuple(int(s) for s in sites)
    if not sites or len(set(sites)) != len(sites):
        raise InvalidArgumentError("site list must be nonempty and distinct")
    if len(sites) > MAX_MEASURED_SITES:
        raise ResourceLimitError(f"{len(sites)} measured sites exceed cap {MAX_MEASURED_SITES}")
    if isinstance(state, PureState):
        if min(sites) < 1 or max(sites) > state.n_qubits:
            raise InvalidArgumentError(f"sites {sites} outside 1..{state.n_qubits}")
    elif not set(sites) <= set(state.sites):
        raise InvalidArgumentError(f"sites {sites} not in {state.sites}")
    return sites


def born_probabilities(
    state: Union[PureState, DensityMatrix], u: Union[LocalUnitary, np.ndarray], sites: Sequence[int]
) -> np.ndarray:
    """``p(k) = <k| u rho_AB u^dagger |k>``, indexed with ``sites[0]`` as the top bit."""
    sites = _check_sites(state, sites)
    us = u.per_qubit if isinstance(u, LocalUnitary) else np.asarray(u, dtype=complex).reshape(-1, 2, 2)
    if us.shape[0] != len(sites):
        raise InvalidArgumentError(f"{us.shape[0]} unitary factors for {len(sites)} sites")
    return _outcome_probabilities(state, sites, us[None])[0]


def _index_bits(indices: np.ndarray, n: int) -> np.ndarray:
    shifts = np.arange(n - 1, -1, -1)
    return ((indices[..., None] >> shifts) & 1).astype(np.uint8)


def generate_dataset(
    state: Union[PureState, DensityMatrix],
    sites: Sequence[int],
    m: int,
    p: int = 1,
    ensemble: str = "clifford",
    seed: int = 0,
    batch_size: int = 512,
) -> MeasurementDataset:
    """Simulate ``m`` randomized measurements with ``p`` shots each.

    Record ``r`` draws its unitaries and then its ``p`` outcomes from
    :func:`record_rng` ``(seed, r)``, so the output does not depend on
    ``batch_size`` or on how records are scheduled.
    """
    if m < 1 or p < 1:
        raise InvalidArgumentError("m and p must be >= 1")
    sites = _check_sites(state, sites)
    n = len(sites)
    n_sites = state.n_qubits if isinstance(state, PureState) else max(state.sites)
    us = np.empty((m, n, 2, 2), dtype=complex)
    outcomes = np.empty((m, p, n), dtype=np.uint8)
    streams = _RecordStreams(seed)
    for start in range(0, m, batch_size):
        stop = min(start + batch_size, m)
        uniforms = np.empty((stop - start, p))
        for r in range(start, stop):
            us[r], uniforms[r - start] = _record_draws(streams(r), n, p, ensemble)
        cdf = np.cumsum(_outcome_probabilities(state, sites, us[start:stop]), axis=1)
        cdf[:, -1] = 1.0
        draws = np.empty((stop - start, p), dtype=np.int64)
        for i in range(stop - start):
            draws[i] = np.searchsorted(cdf[i], uniforms[i], side="right")
        outcomes[start:stop] = _index_bits(np.minimum(draws, 2**n - 1), n)
    return MeasurementDataset(n_sites, sites, ensemble, seed, us, outcomes)


# ---------------------------------------------------------------------------
# persistence


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=False)


def dataset_lines(ds: MeasurementDataset) -> Iterator[str]:
    header = {
        "version": FORMAT_VERSION,
        "n_sites": ds.n_sites,
        "sites": list(ds.site_list),
        "ensemble": ds.ensemble,
        "seed": ds.seed,
        "m": ds.m,
        "p": ds.p,
    }
    yield _dumps(header)
    for r in range(ds.m):
        u = ds.unitaries[r]
        flat = np.stack([u.real, u.imag], axis=-1).reshape(len(ds.site_list), 8)
        rec = {
            "r": r,
            "u": [[float(x) for x in row] for row in flat],
            "k": [_bitstring(k) for k in ds.outcomes[r]],
        }
        yield _dumps(rec)


def write_dataset(ds: MeasurementDataset, path) -> Path:
    """Write ``ds`` as UTF-8, LF-terminated JSON lines.

    Line 1 is the header ``{"version","n_sites","sites","ensemble","seed","m","p"}``;
    each following line is ``{"r": index, "u": [[8 floats per qubit]], "k": [bitstrings]}``
    with the 8 floats being re/im pairs of the row-major 2x2 factor.
    """
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in dataset_lines(ds):
            fh.write(line + "\n")
    return path


def _parse_line(line, lineno):
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"invalid JSON ({exc.msg})", lineno) from None
    if not isinstance(obj, dict):
        raise DatasetFormatError("expected a JSON object", lineno)
    return obj


def read_dataset(path) -> MeasurementDataset:
    """Parse a dataset file; raises on the first malformed line (nothing partial is returned)."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DatasetFormatError("empty file")
    header = _parse_line(lines[0], 1)
    required = ("version", "n_sites", "sites", "ensemble", "seed", "m", "p")
    missing = [k for k in required if k not in header]
    if missing:
        raise DatasetFormatError(f"header missing keys {missing}", 1)
    if header["version"] != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported version {header['version']!r}", 1)
    sites = [int(s) for s in header["sites"]]
    n, m, p = len(sites), int(header["m"]), int(header["p"])
    if m < 1 or p < 1 or n < 1:
        raise DatasetFormatError("m, p and the site list must be positive", 1)
    if len(lines) - 1 != m:
        raise DatasetFormatError(f"header announces {m} records, found {len(lines) - 1}")
    us = np.empty((m, n, 2, 2), dtype=complex)
    outcomes = np.empty((m, p, n), dtype=np.uint8)
    for r, line in enumerate(lines[1:]):
        lineno = r + 2
        rec = _parse_line(line, lineno)
        if rec.get("r") != r:
            raise DatasetFormatError(f"expected record index {r}, got {rec.get('r')!r}", lineno)
        try:
            u = np.array(rec["u"], dtype=float)
            ks = rec["k"]
        except (KeyError, TypeError, ValueError):
            raise DatasetFormatError("record needs numeric 'u' and list 'k'", lineno) from None
        if u.shape != (n, 8):
            raise DatasetFormatError(f"'u' must be {n} rows of 8 floats", lineno)
        if not isinstance(ks, list) or len(ks) != p:
            raise DatasetFormatError(f"'k' must hold {p} bitstrings", lineno)
        if any(not isinstance(k, str) or len(k) != n or set(k) - {"0", "1"} for k in ks):
            raise DatasetFormatError(f"bitstrings must be {n} characters of 0/1", lineno)
        factors = (u[:, 0::2] + 1j * u[:, 1::2]).reshape(n, 2, 2)
        defect = _unitarity_defect(factors)
        if defect > _UNITARY_TOL:
            raise ValidationError(f"line {lineno}: unitary factor off by {defect:.3g}")
        us[r] = factors
        outcomes[r] = np.array([[c == "1" for c in k] for k in ks], dtype=np.uint8)
    try:
        return MeasurementDataset(
            header["n_sites"], sites, header["ensemble"], header["seed"], us, outcomes
        )
    except InvalidArgumentError as exc:
        raise DatasetFormatError(str(exc), 1) from None
