"""Classical-shadow snapshots and U-statistics for PT-moments.

A single-shot snapshot is the tensor product of single-qubit factors
``3 u^dagger |k><k| u - I``. With ``P`` shots per unitary the snapshot of a
record is the mean of its ``P`` single-shot snapshots. The estimators average
the multi-copy kernel ``Tr[X_{i1} ... X_{in}]`` with ``X_i = rho_i^{T_A}`` over
tuples of distinct records (never over shots of one record).

Two exact evaluation routes are provided:

``factorized``
    The kernel splits into per-qubit traces of 2x2 products (transposed on
    A), summed over the distinct outcomes of each record. Cost grows like
    ``M^n |AB|``; the only option for large subsystems.
``dense``
    Sums over distinct tuples are rewritten by inclusion-exclusion over set
    partitions in terms of ``S = sum_i X_i`` and a few related sums. Cost
    grows like ``M 4^|AB| + 8^|AB|``, which makes ``M`` in the tens of
    thousands cheap for ``|AB| <= 8``.

Both routes give the same number up to rounding and ``route="auto"`` picks
the cheaper one. Summation order is fixed and BLAS runs single-threaded, so
results do not depend on the machine's thread count.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import InsufficientDataError, InvalidArgumentError, ResourceLimitError, UnsupportedOrderError
from .qstate import DensityMatrix, PartitionSpec
from .randmeas import MeasurementDataset, MeasurementRecord

STATISTICS = ("p2", "p3", "s3", "p4")
MAX_DENSE_SITES = 10
MAX_RECONSTRUCT_SITES = 8
DEFAULT_CACHE_BYTES = 256 * 2**20
MAX_FACTORIZED_TUPLES = 2 * 10**6
_CHUNK_ENTRIES = 2**21
_LETTERS = "abcdefgh"


def _outcome_factors(unitaries: np.ndarray) -> np.ndarray:
    """``3 u^dag|k><k|u - I`` for k = 0, 1; input (..., 2, 2), output (..., 2, 2, 2)."""
    v = np.conj(np.asarray(unitaries, dtype=complex))  # v[..., k, :] = conj(row k)
    proj = np.einsum("...ka,...kb->...kab", v, v.conj())
    return 3.0 * proj - np.eye(2)


@dataclass(frozen=True)
class Snapshot:
    """Snapshot of one record on ``sites``.

    ``per_qubit`` holds the shot-averaged single-qubit factors. When the
    snapshot comes from measured data, ``outcome_factors`` (per site, the
    factor for outcome 0 and for outcome 1) and the raw ``bits`` are kept as
    well, so the estimators can use the exact shot average of the product
    operators rather than the product of the per-qubit averages.
    """

    per_qubit: np.ndarray  # (|AB|, 2, 2), ordered like ``sites``
    sites: tuple
    shots_averaged: int = 1
    outcome_factors: Optional[np.ndarray] = field(default=None, compare=False, repr=False)
    bits: Optional[np.ndarray] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        f = np.asarray(self.per_qubit, dtype=complex).reshape(-1, 2, 2)
        object.__setattr__(self, "per_qubit", f)
        object.__setattr__(self, "sites", tuple(int(s) for s in self.sites))
        if len(self.sites) != f.shape[0]:
            raise InvalidArgumentError("one factor per site required")

    def restrict(self, sites: Sequence[int]) -> "Snapshot":
        """Partial trace of the snapshot: keep only the factors on ``sites``."""
        pos = _site_positions(self.sites, sites)
        return Snapshot(
            self.per_qubit[pos],
            tuple(sites),
            self.shots_averaged,
            None if self.outcome_factors is None else self.outcome_factors[pos],
            None if self.bits is None else self.bits[:, pos],
        )


class SnapshotSet(Sequence):
    """``M`` snapshots stored column-wise.

    ``factors`` is ``(M, |AB|, 2, 2)``. Data-derived sets also carry
    ``outcome_factors`` ``(M, |AB|, 2, 2, 2)`` and ``bits`` ``(M, P, |AB|)``.
    """

    def __init__(self, factors, sites, shots_averaged=1, outcome_factors=None, bits=None):
        self.factors = np.asarray(factors, dtype=complex)
        self.sites = tuple(int(s) for s in sites)
        self.shots_averaged = int(shots_averaged)
        if self.factors.ndim != 4 or self.factors.shape[1:] != (len(self.sites), 2, 2):
            raise InvalidArgumentError(f"factor array of shape {self.factors.shape} does not match sites")
        if (outcome_factors is None) != (bits is None):
            raise InvalidArgumentError("outcome_factors and bits go together")
        self.outcome_factors = None if outcome_factors is None else np.asarray(outcome_factors, dtype=complex)
        self.bits = None if bits is None else np.asarray(bits, dtype=np.uint8)
        for arr in (self.factors, self.outcome_factors, self.bits):
            if arr is not None:
                arr.setflags(write=False)

    def __len__(self):
        return self.factors.shape[0]

    def __getitem__(self, idx):
        if isinstance(idx, (slice, list, np.ndarray)):
            return SnapshotSet(
                self.factors[idx],
                self.sites,
                self.shots_averaged,
                None if self.outcome_factors is None else self.outcome_factors[idx],
                None if self.bits is None else self.bits[idx],
            )
        return Snapshot(
            self.factors[idx],
            self.sites,
            self.shots_averaged,
            None if self.outcome_factors is None else self.outcome_factors[idx],
            None if self.bits is None else self.bits[idx],
        )

    def with_factors(self, factors) -> "SnapshotSet":
        """Same sites, new single-qubit factors, shot structure dropped."""
        return SnapshotSet(factors, self.sites, 1)

    @classmethod
    def from_snapshots(cls, snapshots) -> "SnapshotSet":
        if isinstance(snapshots, SnapshotSet):
            return snapshots
        snapshots = list(snapshots)
        if not snapshots:
            raise InsufficientDataError("no snapshots")
        sites = snapshots[0].sites
        if any(s.sites != sites for s in snapshots):
            raise InvalidArgumentError("snapshots cover different site lists")
        shots = {s.shots_averaged for s in snapshots}
        factors = np.stack([s.per_qubit for s in snapshots])
        with_shots = all(s.bits is not None for s in snapshots) and len(shots) == 1
        if with_shots:
            return cls(
                factors,
                sites,
                shots.pop(),
                np.stack([s.outcome_factors for s in snapshots]),
                np.stack([s.bits for s in snapshots]),
            )
        return cls(factors, sites, max(shots))


@dataclass(frozen=True)
class Estimate:
    value: float
    std_error: float
    method: str  # "u-statistic" | "median-of-means"
    m_used: int
    p_used: int
    statistic: str
    partition: Optional[PartitionSpec] = field(default=None, compare=False)
    seed: Optional[int] = field(default=None, compare=False)

    def to_record(self, **extra) -> dict:
        rec = {
            "statistic": self.statistic,
            "partition": None
            if self.partition is None
            else {"A": list(self.partition.a_sites), "B": list(self.partition.b_sites)},
            "value": self.value,
            "std_error": self.std_error,
            "m": self.m_used,
            "p": self.p_used,
            "method": self.method,
            "seed": self.seed,
        }
        rec.update(extra)
        return rec


# ---------------------------------------------------------------------------
# snapshots


def _site_positions(available, wanted):
    lookup = {s: i for i, s in enumerate(available)}
    missing = [s for s in wanted if s not in lookup]
    if missing:
        raise InvalidArgumentError(f"sites {missing} not measured (have {tuple(available)})")
    return [lookup[s] for s in wanted]


def shadow_factors(unitaries: np.ndarray, outcomes: np.ndarray) -> np.ndarray:
    """Shot-averaged single-qubit factors.

    ``unitaries`` is ``(M, n, 2, 2)`` and ``outcomes`` ``(M, P, n)``; returns
    ``(M, n, 2, 2)`` with ``(1/P) sum_s [3 u^dag|k_s><k_s|u - I]``.
    """
    basis = _outcome_factors(unitaries)
    ks = np.asarray(outcomes)
    frac1 = ks.mean(axis=1)[..., None, None]
    return (1.0 - frac1) * basis[..., 0, :, :] + frac1 * basis[..., 1, :, :]


def snapshot_from_record(record: MeasurementRecord, sites: Sequence[int] = None) -> Snapshot:
    rec_sites = tuple(record.sites) or tuple(range(1, len(record.unitary) + 1))
    sites = rec_sites if sites is None else tuple(int(s) for s in sites)
    pos = _site_positions(rec_sites, sites)
    bits = np.array([[c == "1" for c in k] for k in record.outcomes], dtype=np.uint8)[:, pos]
    us = record.unitary.per_qubit[pos]
    f = shadow_factors(us[None], bits[None])[0]
    return Snapshot(f, sites, len(record.outcomes), _outcome_factors(us), bits)


def snapshots_from_dataset(ds: MeasurementDataset, sites: Sequence[int] = None) -> SnapshotSet:
    sites = ds.site_list if sites is None else tuple(int(s) for s in sites)
    pos = _site_positions(ds.site_list, sites)
    us = ds.unitaries[:, pos]
    bits = ds.outcomes[:, :, pos]
    return SnapshotSet(shadow_factors(us, bits), sites, ds.p, _outcome_factors(us), bits)


# ---------------------------------------------------------------------------
# kernel data: each record as a weighted sum of product operators


@dataclass
class _Kernel:
    terms: np.ndarray  # (M, T, L, 2, 2)
    weights: np.ndarray  # (M, T), rows sum to 1, padding has weight 0
    outcome_factors: Optional[np.ndarray]  # (M, L, 2, 2, 2) for the histogram path
    hist_index: Optional[np.ndarray]  # (M, T) MSB-first outcome index per term
    shots: int

    @property
    def m(self):
        return self.terms.shape[0]

    @property
    def n_terms(self):
        return self.terms.shape[1]

    @property
    def n_sites(self):
        return self.terms.shape[2]

    @property
    def single(self):
        return self.n_terms == 1

    def take(self, idx) -> "_Kernel":
        return _Kernel(
            self.terms[idx],
            self.weights[idx],
            None if self.outcome_factors is None else self.outcome_factors[idx],
            None if self.hist_index is None else self.hist_index[idx],
            self.shots,
        )


def _distinct_outcomes(bits: np.ndarray):
    """Distinct rows of each ``bits[m]`` with their frequencies, padded to a common count."""
    m, p, L = bits.shape
    if L > 62:
        keys_bits = bits
        weights = np.full((m, p), 1.0 / p)
        return keys_bits, weights
    shifts = np.arange(L, dtype=np.int64)
    keys = np.sort((bits.astype(np.int64) << shifts).sum(axis=2), axis=1)
    new = np.ones((m, p), dtype=bool)
    new[:, 1:] = keys[:, 1:] != keys[:, :-1]
    group = np.cumsum(new, axis=1) - 1
    t = int(group.max()) + 1
    rows = np.broadcast_to(np.arange(m)[:, None], (m, p))
    ukeys = np.zeros((m, t), dtype=np.int64)
    ukeys[rows, group] = keys
    weights = np.zeros((m, t))
    np.add.at(weights, (rows, group), 1.0 / p)
    ubits = ((ukeys[..., None] >> shifts) & 1).astype(np.intp)
    return ubits, weights


def _kernel(snapshots, partition: PartitionSpec, transpose_a: bool) -> _Kernel:
    return _kernel_for_sites(snapshots, partition.a_sites, partition.b_sites, transpose_a)


def _kernel_for_sites(snapshots, a_sites, b_sites, transpose_a: bool) -> _Kernel:
    snaps = SnapshotSet.from_snapshots(snapshots)
    if len(snaps) == 0:
        raise InsufficientDataError("no snapshots")
    pos_a = _site_positions(snaps.sites, a_sites)
    pos_b = _site_positions(snaps.sites, b_sites)
    pos = pos_a + pos_b
    n_a = len(pos_a)
    m = len(snaps)
    L = len(pos)
    if snaps.bits is None or snaps.shots_averaged == 1:
        terms = snaps.factors[:, None, pos].copy()
        weights = np.ones((m, 1))
        basis = None
        hist_index = None
    else:
        basis = snaps.outcome_factors[:, pos]
        if transpose_a:
            basis = basis.copy()
            basis[:, :n_a] = np.swapaxes(basis[:, :n_a], -1, -2)
        ubits, weights = _distinct_outcomes(snaps.bits[:, :, pos])
        rows = np.arange(m)[:, None, None]
        cols = np.arange(L)[None, None, :]
        terms = basis[rows, cols, ubits]
        hist_index = (ubits << np.arange(L - 1, -1, -1)).sum(axis=2) if L <= 20 else None
        return _Kernel(terms, weights, basis, hist_index, snaps.shots_averaged)
    if transpose_a:
        terms[:, :, :n_a] = np.swapaxes(terms[:, :, :n_a], -1, -2)
    return _Kernel(terms, weights, basis, hist_index, snaps.shots_averaged)


def _order(statistic) -> int:
    if statistic not in STATISTICS:
        raise UnsupportedOrderError(f"unknown statistic {statistic!r}")
    return int(statistic[1])


def _falling(m, n):
    return math.prod(range(m - n + 1, m + 1))


class _ArraySum:
    """Neumaier-compensated running sum of equally shaped arrays."""

    def __init__(self, shape):
        self.total = np.zeros(shape)
        self.comp = np.zeros(shape)

    def add(self, x, where=slice(None)):
        t = self.total[where]
        s = t + x
        big = np.abs(t) >= np.abs(x)
        self.comp[where] += np.where(big, (t - s) + x, (x - s) + t)
        self.total[where] = s

    def result(self):
        return self.total + self.comp


# ---------------------------------------------------------------------------
# factorized route


def _block_rows(per_row: int) -> int:
    return max(1, _CHUNK_ENTRIES // max(1, per_row))


def _factorized_order2(kern: _Kernel):
    tf, w = kern.terms, kern.weights
    m, t, L = tf.shape[:3]
    partials = []
    contrib = _ArraySum(m)
    block = _block_rows(t * m * t)
    for start in range(0, m, block):
        stop = min(start + block, m)
        pt = np.ones((stop - start, t, m, t), dtype=complex)
        for q in range(L):
            pt *= np.einsum("isab,jtba->isjt", tf[start:stop, :, q], tf[:, :, q])
        wm = np.einsum("isjt,is,jt->ij", pt, w[start:stop], w).real
        rows = np.arange(start, stop)
        wm[rows - start, rows] = 0.0
        partials.append(float(np.triu(wm, k=start + 1).sum()))
        contrib.add(wm.sum(axis=1), slice(start, stop))
    return math.fsum(partials), contrib.result(), math.comb(m, 2)


def _factorized_order3(kern: _Kernel, cache_bytes: int = DEFAULT_CACHE_BYTES):
    tf, w = kern.terms, kern.weights
    m, t, L = tf.shape[:3]
    cache = None
    if m * m * t * t * L * 4 * 16 <= cache_bytes:
        cache = np.einsum("isqab,jtqbc->ijstqac", tf, tf)
    partials = []
    contrib = _ArraySum(m)
    for i in range(m - 2):
        rest, wr = tf[i + 1 :], w[i + 1 :]
        r = rest.shape[0]
        if cache is not None:
            pairs = cache[i, i + 1 :]
        else:
            pairs = np.einsum("sqab,jtqbc->jstqac", tf[i], rest)
        block = _block_rows(t * t * r * t)
        for j0 in range(0, r, block):
            j1 = min(j0 + block, r)
            tt = np.ones((j1 - j0, t, t, r, t), dtype=complex)
            for q in range(L):
                tt *= np.einsum("jstab,kuba->jstku", pairs[j0:j1, :, :, q], rest[:, :, q])
            # the symmetrized kernel is Re Tr(X_i X_j X_k) for Hermitian X
            val = np.einsum("jstku,s,jt,ku->jk", tt, w[i], wr[j0:j1], wr).real
            val = np.triu(val, k=j0 + 1)
            partials.append(float(val.sum()))
            contrib.add(np.array([val.sum()]), slice(i, i + 1))
            contrib.add(val.sum(axis=1), slice(i + 1 + j0, i + 1 + j1))
            contrib.add(val.sum(axis=0), slice(i + 1, m))
    return math.fsum(partials), contrib.result(), math.comb(m, 3)


def _cycle_subscripts(n: int, batch_axes: Sequence[str], term_axes: Sequence[str], out: str) -> str:
    parts = []
    for p in range(n):
        parts.append(batch_axes[p] + term_axes[p] + _LETTERS[p] + _LETTERS[(p + 1) % n])
    return ",".join(parts) + "->" + out


def _factorized_order_n(kern: _Kernel, n: int):
    """U-statistic over all n-subsets and orderings (small M only)."""
    tf, w = kern.terms, kern.weights
    m, t, L = tf.shape[:3]
    if math.comb(m, n) > MAX_FACTORIZED_TUPLES:
        raise ResourceLimitError(f"factorized order-{n} route limited to {MAX_FACTORIZED_TUPLES} subsets, got M={m}")
    combos = np.array(list(itertools.combinations(range(m), n)), dtype=np.intp).reshape(-1, n)
    term_axes = "stuv"[:n]
    subs = _cycle_subscripts(n, "x" * n, term_axes, "x" + term_axes)
    wsubs = "x" + term_axes + "," + ",".join("x" + a for a in term_axes) + "->x"
    partials = []
    contrib = _ArraySum(m)
    block = _block_rows(t**n)
    for start in range(0, combos.shape[0], block):
        cb = combos[start : start + block]
        acc = np.zeros(cb.shape[0])
        for rest in itertools.permutations(range(1, n)):
            order = (0,) + rest
            prod = np.ones((cb.shape[0],) + (t,) * n, dtype=complex)
            for q in range(L):
                prod *= np.einsum(subs, *(tf[cb[:, o], :, q] for o in order))
            acc += np.einsum(wsubs, prod, *(w[cb[:, o]] for o in order)).real
        # each cyclic class stands for n of the n! orderings
        acc *= n / math.factorial(n)
        partials.append(float(acc.sum()))
        for col in range(n):
            contrib.add(np.bincount(cb[:, col], weights=acc, minlength=m))
    return math.fsum(partials), contrib.result(), math.comb(m, n)


def _pair_word_sum(kern: _Kernel, word: str) -> float:
    """``sum_{i,j} Tr[word]`` (i = j included) for a cyclic word over 'i' and 'j'."""
    tf, w = kern.terms, kern.weights
    m, t, L = tf.shape[:3]
    n = len(word)
    term_axes = "stuv"[:n]
    batch = ["I" if c == "i" else "J" for c in word]
    subs = _cycle_subscripts(n, batch, term_axes, "IJ" + term_axes)
    wsubs = "IJ" + term_axes + "," + ",".join(b + a for b, a in zip(batch, term_axes)) + "->"
    partials = []
    block = _block_rows(m * t**n)
    for start in range(0, m, block):
        fi, wi = tf[start : start + block], w[start : start + block]
        acc = None
        for q in range(L):
            ops = [fi[:, :, q] if c == "i" else tf[:, :, q] for c in word]
            val = np.einsum(subs, *ops)
            acc = val if acc is None else acc * val
        ws = [wi if c == "i" else w for c in word]
        partials.append(complex(np.einsum(wsubs, acc, *ws)).real)
    return math.fsum(partials)


# ---------------------------------------------------------------------------
# dense route


def _kron_batch(f: np.ndarray) -> np.ndarray:
    """(..., L, 2, 2) -> (..., 2^L, 2^L) with site 0 as the most significant factor."""
    out = f[..., 0, :, :]
    for q in range(1, f.shape[-3]):
        d = out.shape[-1]
        nxt = out[..., :, None, :, None] * f[..., q, None, :, None, :]
        out = nxt.reshape(out.shape[:-2] + (2 * d, 2 * d))
    return out


def _use_histogram(kern: _Kernel) -> bool:
    return kern.hist_index is not None and kern.n_terms > 2 * kern.n_sites


def _histogram_dense(basis: np.ndarray, hist: np.ndarray) -> np.ndarray:
    """``sum_k h(k) kron_q F_q[k_q]`` for a batch; basis (B, L, 2, 2, 2), hist (B, 2^L)."""
    b, L = basis.shape[:2]
    cur = hist.reshape(b, 2**L, 1).astype(complex)
    for q in range(L):
        rem = cur.shape[1] // 2
        # contract the leading outcome bit of qubit q against its 2x2 factors
        cur = cur.reshape(b, 2, rem * cur.shape[2]).transpose(0, 2, 1)
        cur = np.matmul(cur, basis[:, q].reshape(b, 2, 4)).reshape(b, rem, -1)
    dim = 2**L
    cur = cur.reshape((b,) + (2, 2) * L)
    perm = [0] + [1 + 2 * q for q in range(L)] + [2 + 2 * q for q in range(L)]
    return cur.transpose(perm).reshape(b, dim, dim)


def _dense_chunks(kern: _Kernel, power: int = 1):
    """Yield dense ``X_i^power`` in chunks of shape (B, D, D)."""
    m, t, L = kern.terms.shape[:3]
    dim = 2**L
    hist_path = _use_histogram(kern)
    per = dim * dim * (1 if hist_path else t)
    step = _block_rows(per)
    for start in range(0, m, step):
        stop = min(start + step, m)
        if kern.single and power > 1:
            f = kern.terms[start:stop, 0]
            fp = f
            for _ in range(power - 1):
                fp = fp @ f
            yield _kron_batch(fp)
            continue
        if hist_path:
            hist = np.zeros((stop - start, dim))
            rows = np.broadcast_to(np.arange(stop - start)[:, None], kern.hist_index[start:stop].shape)
            np.add.at(hist, (rows, kern.hist_index[start:stop]), kern.weights[start:stop])
            x = _histogram_dense(kern.outcome_factors[start:stop], hist)
        else:
            x = np.einsum("bt,btij->bij", kern.weights[start:stop], _kron_batch(kern.terms[start:stop]))
        xp = x
        for _ in range(power - 1):
            xp = xp @ x
        yield xp


def _dense_sum(kern: _Kernel, power: int = 1) -> np.ndarray:
    dim = 2**kern.n_sites
    total = np.zeros((dim, dim), dtype=complex)
    for chunk in _dense_chunks(kern, power):
        total += chunk.sum(axis=0)
    return total


def _trace_powers(kern: _Kernel, power: int) -> np.ndarray:
    """``Tr[X_i^power]`` for every record (real for Hermitian ``X_i``)."""
    if kern.single:
        f = kern.terms[:, 0]
        fp = f
        for _ in range(power - 1):
            fp = fp @ f
        return np.prod(np.einsum("mqaa->mq", fp), axis=1).real
    out = []
    half = power // 2
    for x in _dense_chunks(kern, 1):
        a = x if half == 1 else x @ x
        b = a if power % 2 == 0 else a @ x
        out.append(np.einsum("bij,bji->b", a, b).real)
    return np.concatenate(out)


def _set_partitions(items):
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in _set_partitions(rest):
        yield [[first]] + part
        for i in range(len(part)):
            yield part[:i] + [[first] + part[i]] + part[i + 1 :]


def _is_cyclic_block(block, n):
    s = set(block)
    return any(all((start + j) % n in s for j in range(len(block))) for start in range(n))


def _word_trace_sum(kern: _Kernel, word, s: np.ndarray) -> float:
    """``sum_i Tr[word]`` where 'X' is ``X_i`` and 'S' the dense sum."""
    partials = []
    for x in _dense_chunks(kern):
        prod = None
        for tok in word:
            mat = x if tok == "X" else s
            if prod is None:
                prod = np.broadcast_to(mat, x.shape).copy()
            else:
                prod = prod @ mat
        partials.append(complex(np.einsum("bii->", prod)).real)
    return math.fsum(partials)


def _outer_rows(v: np.ndarray) -> np.ndarray:
    """(N, k, 4) -> (N, 4^k): row-wise Kronecker product of the k vectors."""
    out = np.ones((v.shape[0], 1), dtype=complex)
    for q in range(v.shape[1]):
        out = (out[:, :, None] * v[:, q, None, :]).reshape(v.shape[0], -1)
    return out


def _pair_layout_perm(L: int):
    # matrix axes (a_1..a_L, b_1..b_L) <-> paired axes (a_1, b_1, ..., a_L, b_L)
    return [i for q in range(L) for i in (q, L + q)]


def _from_pair_layout(mat: np.ndarray, L: int) -> np.ndarray:
    dim = 2**L
    perm = _pair_layout_perm(L)
    return mat.reshape((2,) * (2 * L)).transpose(np.argsort(perm)).reshape(dim, dim)


def _to_pair_layout(a: np.ndarray, L: int) -> np.ndarray:
    h = L // 2
    return a.reshape((2,) * (2 * L)).transpose(_pair_layout_perm(L)).reshape(4**h, 4 ** (L - h))


def _row_block(width: int) -> int:
    return _block_rows(width)


def _product_sum(f: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``sum_r w_r kron_q f[r, q]`` as one matrix product over split halves."""
    n, L = f.shape[:2]
    h = L // 2
    fv = f.reshape(n, L, 4)
    acc = np.zeros((4**h, 4 ** (L - h)), dtype=complex)
    step = _row_block(4 ** max(h, L - h))
    for start in range(0, n, step):
        left = _outer_rows(fv[start : start + step, :h]) * w[start : start + step, None]
        right = _outer_rows(fv[start : start + step, h:])
        acc += left.T @ right
    return _from_pair_layout(acc, L)


def _product_traces(f: np.ndarray, a: np.ndarray) -> np.ndarray:
    """``Tr[A kron_q f[r, q]]`` for every row r."""
    n, L = f.shape[:2]
    h = L // 2
    fv = f.reshape(n, L, 4)
    a_pair = _to_pair_layout(np.ascontiguousarray(a.T), L)
    out = np.empty(n, dtype=complex)
    step = _row_block(4 ** max(h, L - h))
    for start in range(0, n, step):
        left = _outer_rows(fv[start : start + step, :h])
        right = _outer_rows(fv[start : start + step, h:])
        out[start : start + step] = np.einsum("nx,nx->n", left @ a_pair, right)
    return out


def _record_traces(kern: _Kernel, a: np.ndarray, power: int = 1) -> np.ndarray:
    """``Tr[A X_r^power]`` per record, using product structure where it exists."""
    if kern.single:
        f = kern.terms[:, 0]
        fp = f
        for _ in range(power - 1):
            fp = fp @ f
        return _product_traces(fp, a).real
    if power == 1:
        m, t = kern.weights.shape
        flat = kern.terms.reshape((m * t,) + kern.terms.shape[2:])
        vals = _product_traces(flat, a).reshape(m, t)
        return np.einsum("mt,mt->m", vals, kern.weights).real
    a_t = np.ascontiguousarray(a.T)
    return np.concatenate([np.einsum("ab,nab->n", a_t, x).real for x in _dense_chunks(kern, power)])


class _DenseSums:
    """Lazily computed dense sums ``S``, ``S^2`` and ``Q_p = sum_i X_i^p``."""

    def __init__(self, kern: _Kernel):
        self.kern = kern
        self._powers = {}
        self._s2 = None
        self._stats = {}

    def record_stats(self, order: int) -> dict:
        """One pass over dense ``X_i`` for records with several distinct outcomes.

        Always gives ``tr2 = Tr X_i^2``; ``order >= 3`` adds ``tr3 = Tr X_i^3``,
        ``tr2s = Tr X_i^2 S`` and ``q2 = sum_i X_i^2``.
        """
        if self._stats.get("order", 0) >= order:
            return self._stats
        kern = self.kern
        s_t = np.ascontiguousarray(self.s.T) if order >= 3 else None
        tr2, tr3, tr2s = [], [], []
        q2 = np.zeros_like(self.s) if order >= 3 else None
        for x in _dense_chunks(kern, 1):
            # X is Hermitian, so Tr X^2 is the squared Frobenius norm
            tr2.append(np.einsum("bij,bij->b", x, x.conj()).real)
            if order >= 3:
                x2 = x @ x
                q2 += x2.sum(axis=0)
                tr3.append(np.einsum("bij,bji->b", x2, x).real)
                tr2s.append(np.einsum("ab,nab->n", s_t, x2).real)
        stats = {"order": order, "tr2": np.concatenate(tr2)}
        if order >= 3:
            stats.update(tr3=np.concatenate(tr3), tr2s=np.concatenate(tr2s), q2=q2)
        self._stats = stats
        return stats

    def trace_powers(self, power: int) -> np.ndarray:
        if self.kern.single or power > 3:
            return _trace_powers(self.kern, power)
        return self.record_stats(power)[f"tr{power}"]

    def q(self, p: int) -> np.ndarray:
        if p not in self._powers:
            kern = self.kern
            if kern.single:
                f = kern.terms[:, 0]
                fp = f
                for _ in range(p - 1):
                    fp = fp @ f
                self._powers[p] = _product_sum(fp, np.ones(kern.m))
            elif p == 1:
                m, t = kern.weights.shape
                flat = kern.terms.reshape((m * t,) + kern.terms.shape[2:])
                self._powers[p] = _product_sum(flat, kern.weights.reshape(-1))
            elif p == 2:
                self._powers[p] = self.record_stats(3)["q2"]
            else:
                self._powers[p] = _dense_sum(kern, p)
        return self._powers[p]

    @property
    def s(self) -> np.ndarray:
        return self.q(1)

    @property
    def s2(self) -> np.ndarray:
        if self._s2 is None:
            self._s2 = self.s @ self.s
        return self._s2

    def s_power(self, k: int) -> np.ndarray:
        return {1: lambda: self.s, 2: lambda: self.s2}[k]()


def _trace_product(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.einsum("ab,ba->", a, b).real)


def _dense_distinct_sum(kern: _Kernel, n: int, sums: Optional[_DenseSums] = None) -> float:
    """Sum of ``Tr[X_{i1}...X_{in}]`` over ordered tuples of distinct records.

    Moebius inversion over set partitions of the n slots: each partition
    contributes ``prod_blocks (-1)^(|b|-1) (|b|-1)!`` times the unrestricted
    sum with equal indices inside blocks.
    """
    sums = sums or _DenseSums(kern)
    terms = []
    for part in _set_partitions(list(range(n))):
        mu = math.prod((-1) ** (len(b) - 1) * math.factorial(len(b) - 1) for b in part)
        multis = [b for b in part if len(b) > 1]
        singles = n - sum(len(b) for b in multis)
        if not multis:
            half = n // 2
            val = _trace_product(sums.s_power(half), sums.s_power(n - half))
        elif len(multis) == 1 and len(multis[0]) == n:
            val = math.fsum(sums.trace_powers(n))
        elif len(multis) == 1 and _is_cyclic_block(multis[0], n):
            qp = sums.q(len(multis[0]))
            val = np.trace(qp).real if singles == 0 else _trace_product(qp, sums.s_power(singles))
        elif len(multis) == 1:
            val = _word_trace_sum(kern, ["X" if j in multis[0] else "S" for j in range(n)], sums.s)
        elif len(multis) == 2 and singles == 0 and all(_is_cyclic_block(b, n) for b in multis):
            val = _trace_product(sums.q(len(multis[0])), sums.q(len(multis[1])))
        elif len(multis) == 2 and singles == 0:
            val = _pair_word_sum(kern, "".join("i" if j in multis[0] else "j" for j in range(n)))
        else:  # pragma: no cover - not reached for n <= 4
            raise UnsupportedOrderError(f"order {n} not supported by the dense route")
        terms.append(mu * float(val))
    return math.fsum(terms)


def _dense_contributions(kern: _Kernel, n: int, sums: _DenseSums) -> np.ndarray:
    """Per record: sum over ordered distinct tuples containing it (n = 2, 3)."""
    if n == 2:
        return 2.0 * (_record_traces(kern, sums.s) - sums.trace_powers(2))
    t_xs2 = _record_traces(kern, sums.s2)
    t_x2s = _record_traces(kern, sums.s, power=2) if kern.single else sums.record_stats(3)["tr2s"]
    t_xq = _record_traces(kern, sums.q(2))
    return 3.0 * (t_xs2 - 2.0 * t_x2s - t_xq + 2.0 * sums.trace_powers(3))


# ---------------------------------------------------------------------------
# route selection and public estimators


def _route_costs(kern: _Kernel, n: int):
    m, t, L = kern.terms.shape[:3]
    dim2 = 4.0**L
    build = (2 * L if _use_histogram(kern) else t) * dim2
    dense = 3.0 * m * build + 2.0 * dim2**1.5
    if not kern.single:
        dense += (n - 1) * m * dim2**1.5
    if n == 4:
        dense += 8.0 * m * m * t**4 * L
    fact = 8.0 * L * n * _falling(m, n) / math.factorial(n) * float(t) ** n
    return dense, fact


def _choose_route(kern: _Kernel, n: int, route: str) -> str:
    if route not in ("auto", "dense", "factorized"):
        raise InvalidArgumentError(f"unknown route {route!r}")
    L = kern.n_sites
    if route == "dense" and L > MAX_DENSE_SITES:
        raise ResourceLimitError(f"dense route limited to {MAX_DENSE_SITES} sites, got {L}")
    if route != "auto":
        return route
    if L > MAX_DENSE_SITES:
        return "factorized"
    dense, fact = _route_costs(kern, n)
    return "dense" if dense < fact else "factorized"


def _u_statistic(kern: _Kernel, n: int, route: str, need_loo: bool):
    """Return (value, leave-one-out values or None)."""
    m = kern.m
    route = _choose_route(kern, n, route)
    with threadpool_limits(limits=1, user_api="blas"):
        if route == "factorized":
            if n == 2:
                total, contrib, norm = _factorized_order2(kern)
            elif n == 3:
                total, contrib, norm = _factorized_order3(kern)
            else:
                total, contrib, norm = _factorized_order_n(kern, n)
            value = total / norm
            loo = (total - contrib) / math.comb(m - 1, n) if need_loo and m > n else None
            return value, loo
        sums = _DenseSums(kern)
        total = _dense_distinct_sum(kern, n, sums)
        value = total / _falling(m, n)
        loo = None
        if need_loo and m > n:
            if n in (2, 3):
                loo = (total - _dense_contributions(kern, n, sums)) / _falling(m - 1, n)
            else:
                loo = np.empty(m)
                for r in range(m):
                    keep = np.arange(m) != r
                    loo[r] = _dense_distinct_sum(kern.take(keep), n) / _falling(m - 1, n)
        return value, loo


def _jackknife_from_loo(loo: np.ndarray) -> float:
    m = loo.shape[0]
    mean = math.fsum(loo) / m
    return math.sqrt((m - 1) / m * math.fsum((loo - mean) ** 2))


def jackknife_values(snapshots, partition: PartitionSpec, statistic: str, route: str = "auto"):
    """Full-sample U-statistic and its ``M`` delete-one-record replicates."""
    n = _order(statistic)
    kern = _kernel(snapshots, partition, transpose_a=statistic != "s3")
    if kern.m < n + 1:
        raise InsufficientDataError(f"jackknife for order {n} needs M >= {n + 1}, got {kern.m}")
    return _u_statistic(kern, n, route, need_loo=True)


def jackknife_error(snapshots, partition: PartitionSpec, statistic: str, route: str = "auto") -> float:
    """Delete-one-record jackknife standard error of the U-statistic."""
    _, loo = jackknife_values(snapshots, partition, statistic, route)
    return _jackknife_from_loo(loo)


def jackknife_derived(func, full_values: Sequence[float], loo_values: Sequence[np.ndarray]):
    """Value and jackknife error of ``func(*statistics)`` from per-statistic replicates."""
    value = func(*full_values)
    reps = np.array([func(*vals) for vals in zip(*loo_values)], dtype=float)
    return value, _jackknife_from_loo(reps)


def _estimate(snapshots, partition, statistic, route, with_error):
    n = _order(statistic)
    kern = _kernel(snapshots, partition, transpose_a=statistic != "s3")
    m = kern.m
    if m < n:
        raise InsufficientDataError(f"{statistic} needs at least {n} snapshots, got {m}")
    value, loo = _u_statistic(kern, n, route, need_loo=with_error and m > n)
    if loo is not None:
        err = _jackknife_from_loo(loo)
    else:
        err = float("nan") if with_error else 0.0
    return Estimate(float(value), err, "u-statistic", m, kern.shots, statistic, partition)


def estimate_p2(snapshots, partition: PartitionSpec, route: str = "auto", with_error: bool = True) -> Estimate:
    """U-statistic for ``p_2 = Tr[(rho^{T_A})^2]`` (equal to the purity)."""
    return _estimate(snapshots, partition, "p2", route, with_error)


def estimate_p3(snapshots, partition: PartitionSpec, route: str = "auto", with_error: bool = True) -> Estimate:
    """U-statistic for ``p_3 = Tr[(rho^{T_A})^3]``."""
    return _estimate(snapshots, partition, "p3", route, with_error)


def estimate_s3(snapshots, partition: PartitionSpec, route: str = "auto", with_error: bool = True) -> Estimate:
    """U-statistic for ``Tr[rho_AB^3]`` (no transposition anywhere)."""
    return _estimate(snapshots, partition, "s3", route, with_error)


def estimate_pn(
    snapshots, partition: PartitionSpec, n: int, route: str = "auto", with_error: bool = True
) -> Estimate:
    """General ``p_n`` for ``n`` in {2, 3, 4}.

    For ``n = 4`` the dense-route jackknife recomputes the statistic once per
    record, so pass ``with_error=False`` for large ``M``.
    """
    if n not in (2, 3, 4):
        raise UnsupportedOrderError(f"p_n supported for n in {{2, 3, 4}}, got {n}")
    return _estimate(snapshots, partition, f"p{n}", route, with_error)


def estimate(snapshots, partition, statistic: str, route: str = "auto", with_error: bool = True) -> Estimate:
    return _estimate(snapshots, partition, statistic, route, with_error)


def median_of_means(
    snapshots, partition: PartitionSpec, statistic: str, k_groups: int, route: str = "auto"
) -> Estimate:
    """Median of per-chunk U-statistics over ``k_groups`` contiguous chunks.

    The error is ``1.4826 * MAD / sqrt(k_groups)``.
    """
    n = _order(statistic)
    if k_groups < 1:
        raise InvalidArgumentError("k_groups must be >= 1")
    kern = _kernel(snapshots, partition, transpose_a=statistic != "s3")
    m = kern.m
    if m < k_groups * n:
        raise InsufficientDataError(f"{k_groups} chunks of order {n} need M >= {k_groups * n}")
    values = np.array(
        [_u_statistic(kern.take(idx), n, route, need_loo=False)[0] for idx in np.array_split(np.arange(m), k_groups)]
    )
    med = float(np.median(values))
    mad = float(np.median(np.abs(values - med)))
    return Estimate(med, 1.4826 * mad / math.sqrt(k_groups), "median-of-means", m, kern.shots, statistic, partition)


def reconstruct_mean_state(snapshots) -> DensityMatrix:
    """Average of the dense snapshot operators (diagnostic; ``|AB| <= 8``)."""
    snaps = SnapshotSet.from_snapshots(snapshots)
    n = len(snaps.sites)
    if n > MAX_RECONSTRUCT_SITES:
        raise ResourceLimitError(f"dense reconstruction of {n} qubits exceeds cap")
    kern = _kernel_for_sites(snaps, (), snaps.sites, transpose_a=False)
    with threadpool_limits(limits=1, user_api="blas"):
        total = _dense_sum(kern) / kern.m
    total = 0.5 * (total + total.conj().T)
    return DensityMatrix((2,) * n, total, snaps.sites)
