import itertools
import math

import numpy as np
import pytest

from ptmoments.qstate import (
    DensityMatrix,
    PartitionSpec,
    PureState,
    copy_permutation_operator,
    cycle,
    multicopy_pt_moment_oracle,
    trace_with_product,
)


def random_density_matrix(rng, n_qubits, rank=None) -> DensityMatrix:
    dim = 2**n_qubits
    rank = dim if rank is None else rank
    g = rng.normal(size=(dim, rank)) + 1j * rng.normal(size=(dim, rank))
    rho = g @ g.conj().T
    return DensityMatrix((2,) * n_qubits, rho / np.trace(rho).real)


def random_pure_state(rng, n_qubits) -> PureState:
    v = rng.normal(size=2**n_qubits) + 1j * rng.normal(size=2**n_qubits)
    return PureState(n_qubits, v / np.linalg.norm(v))


def random_hermitian(rng, dim) -> np.ndarray:
    g = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    return 0.5 * (g + g.conj().T)


def mean_and_sem(values):
    v = np.asarray(values, dtype=float)
    return v.mean(), v.std(ddof=1) / np.sqrt(v.size)


def dense_snapshot(us, bits):
    """Mean over shots of kron_q (3 u_q^dag |k><k| u_q - I), built from scratch."""
    total = 0
    for shot in bits:
        op = np.ones((1, 1))
        for u, k in zip(us, shot):
            ket = np.zeros(2)
            ket[k] = 1.0
            op = np.kron(op, 3 * u.conj().T @ np.outer(ket, ket) @ u - np.eye(2))
        total = total + op
    return total / len(bits)


def brute_force_u_statistic(ds, part, n, transpose=True):
    """Average of the multi-copy contraction over ordered tuples of distinct records."""
    sites = ds.site_list
    keep = [sites.index(s) for s in part.ab_sites]
    snaps = [dense_snapshot(ds.unitaries[r][keep], ds.outcomes[r][:, keep]) for r in range(ds.m)]
    if transpose:
        op = None
        ordered = part.ab_sites
    else:
        ordered = part.ab_sites
        op = copy_permutation_operator([2] * len(ordered), [cycle(n, 1)] * len(ordered))
    vals = []
    for tup in itertools.permutations(range(ds.m), n):
        mats = [snaps[i] for i in tup]
        if op is None:
            vals.append(multicopy_pt_moment_oracle(mats, part, n, sites=ordered))
        else:
            vals.append(trace_with_product(op, mats).real)
    return math.fsum(vals) / len(vals)


def random_partition(rng, n_sites):
    sites = list(rng.permutation(np.arange(1, n_sites + 1)))
    size = int(rng.integers(2, n_sites + 1))
    cut = int(rng.integers(1, size))
    return PartitionSpec(tuple(int(s) for s in sites[:cut]), tuple(int(s) for s in sites[cut:size]))


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)
