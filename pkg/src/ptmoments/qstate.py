"""Exact dense simulation of small qubit systems.

Site indices are 1-based throughout. A bitstring ``k_1 ... k_N`` maps to the
basis index ``sum_i k_i 2**(N - i)``, i.e. site 1 is the most significant bit,
and ``|0>`` is spin up.

Everything here is an oracle for the randomized-measurement estimators: state
preparation, quench dynamics by eigendecomposition, partial traces, partial
transposes and exact PT-moments ``p_n = Tr[(rho^{T_A})^n]``.
"""

from __future__ import annotations

import io
import itertools
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence, Union

import numpy as np
import scipy.sparse as sp

from .errors import InvalidArgumentError, ResourceLimitError

MAX_QUBITS = 14
MAX_MULTICOPY_ENTRIES = 2**24
NEGATIVITY_TOL = 1e-10

_NORM_TOL = 1e-10
_HERMITIAN_TOL = 1e-10
_PSD_TOL = -1e-9


@dataclass(frozen=True)
class PureState:
    n_qubits: int
    amplitudes: np.ndarray

    def __post_init__(self):
        amps = np.asarray(self.amplitudes, dtype=complex).reshape(-1)
        if self.n_qubits < 1 or amps.shape[0] != 2**self.n_qubits:
            raise InvalidArgumentError(
                f"expected {2 ** max(self.n_qubits, 0)} amplitudes for "
                f"{self.n_qubits} qubits, got {amps.shape[0]}"
            )
        norm = np.linalg.norm(amps)
        if abs(norm - 1.0) > _NORM_TOL:
            raise InvalidArgumentError(f"state not normalized (norm={norm!r})")
        amps.setflags(write=False)
        object.__setattr__(self, "amplitudes", amps)

    @property
    def dim(self) -> int:
        return 2**self.n_qubits

    def density_matrix(self) -> "DensityMatrix":
        psi = self.amplitudes
        return DensityMatrix((2,) * self.n_qubits, np.outer(psi, psi.conj()))

    def expectation(self, op: np.ndarray) -> float:
        psi = self.amplitudes
        return float(np.real(np.vdot(psi, op @ psi)))


@dataclass(frozen=True)
class DensityMatrix:
    """Dense Hermitian, unit-trace matrix over labelled sites.

    ``sites`` labels the tensor factors in order; it defaults to ``1..len(dims)``.
    Positivity is not enforced on construction (use :meth:`check_psd`), since
    averaged shadow snapshots are valid unit-trace Hermitian matrices that need
    not be positive.
    """

    dims: tuple
    matrix: np.ndarray
    sites: tuple = field(default=None)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        mat = np.asarray(self.matrix, dtype=complex)
        size = math.prod(dims)
        if mat.shape != (size, size):
            raise InvalidArgumentError(f"matrix shape {mat.shape} does not match dims {dims}")
        if not np.allclose(mat, mat.conj().T, atol=_HERMITIAN_TOL, rtol=0):
            raise InvalidArgumentError("density matrix is not Hermitian")
        tr = np.trace(mat).real
        if abs(tr - 1.0) > _NORM_TOL:
            raise InvalidArgumentError(f"density matrix trace is {tr!r}, expected 1")
        sites = tuple(range(1, len(dims) + 1)) if self.sites is None else tuple(self.sites)
        if len(sites) != len(dims) or len(set(sites)) != len(sites):
            raise InvalidArgumentError(f"site labels {sites} do not match dims {dims}")
        mat.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "matrix", mat)
        object.__setattr__(self, "sites", sites)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def purity(self) -> float:
        return float(np.real(np.einsum("ij,ji->", self.matrix, self.matrix)))

    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.matrix)

    def check_psd(self, tol: float = _PSD_TOL) -> bool:
        return bool(self.eigenvalues().min() >= tol)


@dataclass(frozen=True)
class PartitionSpec:
    a_sites: tuple
    b_sites: tuple

    def __post_init__(self):
        a = tuple(int(s) for s in self.a_sites)
        b = tuple(int(s) for s in self.b_sites)
        if not a or not b:
            raise InvalidArgumentError("partitions A and B must be nonempty")
        if len(set(a)) != len(a) or len(set(b)) != len(b):
            raise InvalidArgumentError("duplicate sites within a partition")
        if set(a) & set(b):
            raise InvalidArgumentError(f"A={a} and B={b} overlap")
        if min(a + b) < 1:
            raise InvalidArgumentError("site indices are 1-based")
        object.__setattr__(self, "a_sites", a)
        object.__setattr__(self, "b_sites", b)

    @property
    def ab_sites(self) -> tuple:
        return self.a_sites + self.b_sites

    def swapped(self) -> "PartitionSpec":
        return PartitionSpec(self.b_sites, self.a_sites)

    def label(self) -> str:
        return f"A={_compact(self.a_sites)};B={_compact(self.b_sites)}"


def _compact(sites):
    return ",".join(str(s) for s in sites)


@dataclass(frozen=True)
class HamiltonianSpec:
    """Model parameters. XY rates are in 1/s (hbar divided out); TFIM is dimensionless."""

    model: str
    n_qubits: int
    j0: float = 420.0
    alpha: float = 1.24
    b_field: float = 0.0
    j_tfim: float = 1.0

    def __post_init__(self):
        model = self.model.upper()
        if model not in ("XY", "TFIM"):
            raise InvalidArgumentError(f"unknown model {self.model!r}")
        if self.n_qubits < 2:
            raise InvalidArgumentError("need at least two qubits")
        if model == "XY" and self.j0 <= 0:
            raise InvalidArgumentError("j0 must be positive")
        if self.alpha < 0:
            raise InvalidArgumentError("alpha must be non-negative")
        object.__setattr__(self, "model", model)


class Spectrum(NamedTuple):
    energies: np.ndarray
    vectors: np.ndarray


class GroundState(NamedTuple):
    state: PureState
    energy: float
    degenerate: bool


# ---------------------------------------------------------------------------
# states


def _check_n(n_qubits):
    if n_qubits < 1:
        raise InvalidArgumentError("n_qubits must be >= 1")
    if n_qubits > MAX_QUBITS:
        raise ResourceLimitError(f"n_qubits={n_qubits} exceeds dense cap {MAX_QUBITS}")


def basis_index(bits: Sequence[int]) -> int:
    """Index of a bitstring, site 1 most significant."""
    idx = 0
    for b in bits:
        idx = (idx << 1) | int(b)
    return idx


def basis_state(bits: Sequence[int]) -> PureState:
    n = len(bits)
    _check_n(n)
    amps = np.zeros(2**n, dtype=complex)
    amps[basis_index(bits)] = 1.0
    return PureState(n, amps)


def make_ghz(n_qubits: int) -> PureState:
    _check_n(n_qubits)
    amps = np.zeros(2**n_qubits, dtype=complex)
    amps[0] = amps[-1] = 1 / np.sqrt(2)
    return PureState(n_qubits, amps)


def make_neel(n_qubits: int) -> PureState:
    """``|0101...>``: up on odd sites, down on even sites."""
    _check_n(n_qubits)
    return basis_state([i % 2 for i in range(n_qubits)])


def product_state(factors: Sequence[np.ndarray]) -> PureState:
    """Tensor product of single-qubit vectors (each normalized here)."""
    psi = np.ones(1, dtype=complex)
    for f in factors:
        f = np.asarray(f, dtype=complex)
        psi = np.kron(psi, f / np.linalg.norm(f))
    return PureState(len(factors), psi)


def maximally_mixed(n_sites: int, d: int = 2) -> DensityMatrix:
    dim = d**n_sites
    return DensityMatrix((d,) * n_sites, np.eye(dim) / dim)


def depolarize(rho: DensityMatrix, strength: float) -> DensityMatrix:
    if not 0.0 <= strength <= 1.0:
        raise InvalidArgumentError(f"depolarizing strength {strength} outside [0, 1]")
    mat = (1.0 - strength) * rho.matrix + strength * np.eye(rho.dim) / rho.dim
    return DensityMatrix(rho.dims, mat, rho.sites)


# ---------------------------------------------------------------------------
# Hamiltonians and dynamics


def _bit(indices, site, n):
    return (indices >> (n - site)) & 1


def build_hamiltonian(spec: HamiltonianSpec) -> np.ndarray:
    """Dense real-symmetric Hamiltonian for the XY or TFIM chain (open boundaries).

    XY:   sum_{i<j} J0/|i-j|^alpha (s+_i s-_j + h.c.) + B sum_i Z_i
    TFIM: J (sum_i X_i X_{i+1} + sum_i Z_i)
    """
    n = spec.n_qubits
    _check_n(n)
    dim = 2**n
    idx = np.arange(dim)
    h = np.zeros((dim, dim))
    z_sum = sum(1 - 2 * _bit(idx, i, n) for i in range(1, n + 1))
    if spec.model == "XY":
        for i, j in itertools.combinations(range(1, n + 1), 2):
            coupling = spec.j0 / abs(i - j) ** spec.alpha
            # s+s- + s-s+ only connects states where bits i and j differ
            differ = _bit(idx, i, n) != _bit(idx, j, n)
            src = idx[differ]
            dst = src ^ ((1 << (n - i)) | (1 << (n - j)))
            h[dst, src] += coupling
        h[idx, idx] += spec.b_field * z_sum
    else:
        for i in range(1, n):
            flip = (1 << (n - i)) | (1 << (n - i - 1))
            h[idx ^ flip, idx] += spec.j_tfim
        h[idx, idx] += spec.j_tfim * z_sum
    return h


def total_sz(n_qubits: int) -> np.ndarray:
    idx = np.arange(2**n_qubits)
    return np.diag(sum(1.0 - 2 * _bit(idx, i, n_qubits) for i in range(1, n_qubits + 1)))


def diagonalize(h: np.ndarray) -> Spectrum:
    energies, vectors = np.linalg.eigh(h)
    return Spectrum(energies, vectors)


def evolve(state: PureState, h: Union[np.ndarray, Spectrum], t: float) -> PureState:
    """``exp(-i H t)|psi>``. Pass a :class:`Spectrum` to reuse one diagonalization."""
    if t < 0:
        raise InvalidArgumentError("evolution time must be non-negative")
    spec = h if isinstance(h, Spectrum) else diagonalize(np.asarray(h))
    if spec.vectors.shape[0] != state.dim:
        raise InvalidArgumentError(
            f"Hamiltonian dimension {spec.vectors.shape[0]} != state dimension {state.dim}"
        )
    coeffs = spec.vectors.conj().T @ state.amplitudes
    psi = spec.vectors @ (np.exp(-1j * spec.energies * t) * coeffs)
    psi /= np.linalg.norm(psi)
    return PureState(state.n_qubits, psi)


def _fix_phase(vec):
    nz = np.flatnonzero(np.abs(vec) > 1e-12)
    if nz.size:
        vec = vec * (abs(vec[nz[0]]) / vec[nz[0]])
    return vec


def ground_state(h: np.ndarray) -> GroundState:
    """Lowest eigenvector, phase fixed so the first nonzero amplitude is real positive.

    A gap below 1e-10 is flagged (``degenerate=True``, plus a warning); the
    lowest-index eigenvector is returned in that case.
    """
    h = np.asarray(h)
    if not np.allclose(h, h.conj().T, atol=_HERMITIAN_TOL, rtol=0):
        raise InvalidArgumentError("Hamiltonian is not Hermitian")
    energies, vectors = np.linalg.eigh(h)
    degenerate = energies.size > 1 and energies[1] - energies[0] < 1e-10
    if degenerate:
        warnings.warn("degenerate ground space; returning lowest-index eigenvector", stacklevel=2)
    n = int(round(math.log2(h.shape[0])))
    vec = _fix_phase(vectors[:, 0].astype(complex))
    return GroundState(PureState(n, vec), float(energies[0]), bool(degenerate))


# ---------------------------------------------------------------------------
# partial trace and transpose


def _positions(labels, sites):
    lookup = {s: i for i, s in enumerate(labels)}
    try:
        return [lookup[s] for s in sites]
    except KeyError as exc:
        raise InvalidArgumentError(f"site {exc.args[0]} not among {tuple(labels)}") from None


def reduced_density_matrix(
    state: Union[PureState, DensityMatrix], sites: Sequence[int]
) -> DensityMatrix:
    """Partial trace onto ``sites``; the result is ordered as given."""
    sites = tuple(int(s) for s in sites)
    if not sites:
        raise InvalidArgumentError("site list is empty")
    if len(set(sites)) != len(sites):
        raise InvalidArgumentError("duplicate sites")
    if isinstance(state, PureState):
        n = state.n_qubits
        keep = _positions(range(1, n + 1), sites)
        rest = [i for i in range(n) if i not in keep]
        psi = state.amplitudes.reshape((2,) * n).transpose(keep + rest)
        psi = psi.reshape(2 ** len(keep), -1)
        return DensityMatrix((2,) * len(keep), psi @ psi.conj().T, sites)
    labels, dims = state.sites, state.dims
    keep = _positions(labels, sites)
    rest = [i for i in range(len(dims)) if i not in keep]
    k = len(dims)
    tensor = state.matrix.reshape(dims + dims)
    tensor = tensor.transpose(keep + rest + [k + i for i in keep] + [k + i for i in rest])
    dk = math.prod(dims[i] for i in keep)
    dr = math.prod(dims[i] for i in rest)
    tensor = tensor.reshape(dk, dr, dk, dr)
    mat = np.einsum("arbr->ab", tensor)
    return DensityMatrix(tuple(dims[i] for i in keep), mat, sites)


def _check_partition(rho: DensityMatrix, partition: PartitionSpec):
    if sorted(partition.ab_sites) != sorted(rho.sites):
        raise InvalidArgumentError(
            f"partition {partition.label()} does not cover sites {rho.sites} exactly"
        )


def partial_transpose(rho: DensityMatrix, partition: PartitionSpec) -> np.ndarray:
    """``rho^{T_A}`` as a plain matrix (it need not be positive)."""
    _check_partition(rho, partition)
    dims = rho.dims
    k = len(dims)
    a_pos = set(_positions(rho.sites, partition.a_sites))
    axes = list(range(2 * k))
    for i in a_pos:
        axes[i], axes[k + i] = k + i, i
    tensor = rho.matrix.reshape(dims + dims).transpose(axes)
    return tensor.reshape(rho.dim, rho.dim)


def pt_spectrum(rho: DensityMatrix, partition: PartitionSpec) -> np.ndarray:
    return np.linalg.eigvalsh(partial_transpose(rho, partition))


def pt_moments_exact(rho: DensityMatrix, partition: PartitionSpec, n_max: int) -> np.ndarray:
    """``[p_1, ..., p_{n_max}]`` from the eigenvalues of the partial transpose."""
    if n_max < 1:
        raise InvalidArgumentError("n_max must be >= 1")
    lam = pt_spectrum(rho, partition)
    return np.array([np.sum(lam**n) for n in range(1, n_max + 1)])


def negativity(rho: DensityMatrix, partition: PartitionSpec, tol: float = NEGATIVITY_TOL) -> float:
    lam = pt_spectrum(rho, partition)
    return float(-lam[lam < -tol].sum())


# ---------------------------------------------------------------------------
# n-copy permutation operators


def copy_permutation_operator(
    local_dims: Sequence[int], site_perms: Sequence[Sequence[int]]
) -> sp.csr_matrix:
    """Sparse permutation matrix acting on ``n`` copies of a multi-site system.

    ``site_perms[j]`` is a permutation ``sigma`` of the copies for local site
    ``j``: the operator moves the content of copy ``c`` to copy ``sigma[c]`` on
    that site. Copies are the slow index, sites within a copy the fast index.
    """
    local_dims = [int(d) for d in local_dims]
    n = len(site_perms[0])
    L = len(local_dims)
    dim_copy = math.prod(local_dims)
    total = dim_copy**n
    if total * total > MAX_MULTICOPY_ENTRIES:
        raise ResourceLimitError(f"{n}-copy operator of dimension {total} exceeds cap")
    digits = np.array(np.unravel_index(np.arange(total), [dim_copy] * n)).T  # (total, n)
    site_digits = np.stack(
        [np.array(np.unravel_index(digits[:, c], local_dims)).T for c in range(n)], axis=1
    )  # (total, n, L)
    out = np.empty_like(site_digits)
    for j, perm in enumerate(site_perms):
        for c in range(n):
            out[:, perm[c], j] = site_digits[:, c, j]
    out_copy = np.ravel_multi_index(tuple(out[:, :, j] for j in range(L)), local_dims)
    rows = np.ravel_multi_index(tuple(out_copy[:, c] for c in range(n)), [dim_copy] * n)
    return sp.csr_matrix((np.ones(total), (rows, np.arange(total))), shape=(total, total))


def cycle(n: int, shift: int) -> list:
    """Copy permutation ``c -> c + shift (mod n)``."""
    return [(c + shift) % n for c in range(n)]


def pt_permutation_operator(
    sites: Sequence[int], partition: PartitionSpec, n: int, dims: Sequence[int] = None
) -> sp.csr_matrix:
    """Forward cycle on the A sites times backward cycle on the B sites, on n copies."""
    dims = [2] * len(sites) if dims is None else list(dims)
    a = set(partition.a_sites)
    perms = [cycle(n, 1) if s in a else cycle(n, -1) for s in sites]
    return copy_permutation_operator(dims, perms)


def trace_with_product(op: sp.spmatrix, factors: Sequence[np.ndarray]) -> complex:
    """``Tr[op (X_1 x ... x X_n)]`` without forming the dense tensor product.

    Only the entries of the product selected by the nonzeros of ``op`` are
    evaluated, so the cost is linear in ``nnz(op)``.
    """
    coo = sp.coo_matrix(op)
    dim_copy = factors[0].shape[0]
    n = len(factors)
    rows = np.array(np.unravel_index(coo.row, [dim_copy] * n))
    cols = np.array(np.unravel_index(coo.col, [dim_copy] * n))
    vals = coo.data.astype(complex)
    for c, x in enumerate(factors):
        # Tr[O X] = sum_{r,c} O[r,c] X[c,r]
        vals = vals * x[cols[c], rows[c]]
    return complex(vals.sum())


def dense_trace_with_product(op, factors) -> complex:
    """Reference: same as :func:`trace_with_product` via explicit Kronecker products."""
    big = factors[0]
    for x in factors[1:]:
        big = np.kron(big, x)
    if big.size > MAX_MULTICOPY_ENTRIES:
        raise ResourceLimitError("dense tensor product exceeds cap")
    dense = op.toarray() if sp.issparse(op) else np.asarray(op)
    return complex(np.trace(dense @ big))


def multicopy_pt_moment_oracle(
    factors: Sequence, partition: PartitionSpec, n: int, sites: Sequence[int] = None
) -> float:
    """``Tr[P_A^fwd P_B^bwd X_1 x ... x X_n]`` with explicit permutation operators.

    ``factors`` are square matrices (or :class:`DensityMatrix`) over ``sites``,
    which defaults to the factor's own labels, else ``a_sites + b_sites``.
    With all factors equal to ``rho`` this is ``p_n``.
    """
    if n not in (2, 3, 4):
        raise InvalidArgumentError("multi-copy oracle supports n in {2, 3, 4}")
    if len(factors) != n:
        raise InvalidArgumentError(f"expected {n} factors, got {len(factors)}")
    if sites is None:
        first = factors[0]
        sites = first.sites if isinstance(first, DensityMatrix) else partition.ab_sites
    mats = [f.matrix if isinstance(f, DensityMatrix) else np.asarray(f, dtype=complex) for f in factors]
    if sorted(sites) != sorted(partition.ab_sites):
        raise InvalidArgumentError("factor sites do not match the partition")
    dim = 2 ** len(sites)
    if any(m.shape != (dim, dim) for m in mats):
        raise InvalidArgumentError("factor dimensions do not match the site list")
    if dim ** (2 * n) > MAX_MULTICOPY_ENTRIES:
        raise ResourceLimitError(f"{n} copies of {len(sites)} qubits exceed the dense cap")
    op = pt_permutation_operator(sites, partition, n)
    return float(trace_with_product(op, mats).real)


# ---------------------------------------------------------------------------
# text serialization (debugging / golden files)


def write_matrix_text(target, matrix: np.ndarray, dims: Sequence[int]) -> None:
    """Header ``dims: d1,d2,...`` then one line per row of space-separated ``re,im`` pairs.

    A state vector is written as a single column.
    """
    mat = np.asarray(matrix, dtype=complex)
    if mat.ndim == 1:
        mat = mat.reshape(-1, 1)
    lines = ["dims: " + ",".join(str(int(d)) for d in dims)]
    for row in mat:
        lines.append(" ".join(f"{float(z.real)!r},{float(z.imag)!r}" for z in row))
    text = "\n".join(lines) + "\n"
    if isinstance(target, (str, Path)):
        Path(target).write_text(text, encoding="utf-8")
    else:
        target.write(text)


def read_matrix_text(source):
    """Inverse of :func:`write_matrix_text`; returns ``(matrix, dims)``."""
    if isinstance(source, (str, Path)):
        text = Path(source).read_text(encoding="utf-8")
    else:
        text = source.read() if isinstance(source, io.IOBase) else str(source)
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("dims:"):
        raise InvalidArgumentError("missing 'dims:' header")
    dims = tuple(int(x) for x in lines[0][5:].split(","))
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rows.append([complex(float(a), float(b)) for a, b in (p.split(",") for p in line.split())])
        except ValueError:
            raise InvalidArgumentError(f"line {lineno}: malformed entry") from None
    return np.array(rows), dims
