import itertools
import json
import math

import numpy as np
import pytest

from ptmoments.errors import DatasetFormatError, InvalidArgumentError, ResourceLimitError, ValidationError
from ptmoments.qstate import basis_state, make_ghz, make_neel
from ptmoments.randmeas import (
    CLIFFORDS,
    LocalUnitary,
    MeasurementDataset,
    born_probabilities,
    generate_dataset,
    read_dataset,
    _RecordStreams,
    record_rng,
    sample_haar_su2,
    sample_single_qubit_clifford,
    write_dataset,
)

from conftest import random_density_matrix, random_pure_state

PAULIS = [
    np.array([[0, 1], [1, 0]], dtype=complex),
    np.array([[0, -1j], [1j, 0]]),
    np.array([[1, 0], [0, -1]], dtype=complex),
]
HADAMARD = np.array([[1, 1], [1, -1]]) / math.sqrt(2)


def _kron3(u):
    return np.kron(np.kron(u, u), u)


def _permutation_matrix(perm, d=2):
    t = len(perm)
    dim = d**t
    out = np.zeros((dim, dim))
    for idx in itertools.product(range(d), repeat=t):
        src = np.ravel_multi_index(idx, (d,) * t)
        dst = np.ravel_multi_index(tuple(idx[perm.index(k)] for k in range(t)), (d,) * t)
        out[dst, src] = 1
    return out


def test_clifford_table_is_group_mod_phase():
    assert CLIFFORDS.shape == (24, 2, 2)
    signed = [s * p for p in PAULIS for s in (1, -1)]
    for u in CLIFFORDS:
        assert np.allclose(u.conj().T @ u, np.eye(2), atol=1e-12)
        for p in PAULIS:
            image = u @ p @ u.conj().T
            assert any(np.allclose(image, q, atol=1e-12) for q in signed)
    # distinct up to global phase
    for a, b in itertools.combinations(range(24), 2):
        overlap = abs(np.trace(CLIFFORDS[a].conj().T @ CLIFFORDS[b])) / 2
        assert overlap < 1 - 1e-9


def test_clifford_three_design():
    perms = list(itertools.permutations(range(3)))
    ops = [_permutation_matrix(list(p)) for p in perms]
    gram = np.array([[np.trace(a.T @ b) for b in ops] for a in ops])
    # the permutations are linearly dependent for d=2 < t=3; the pseudo-inverse
    # still yields the orthogonal projection onto their span (the Haar twirl)
    wg = np.linalg.pinv(gram)
    u3 = np.array([_kron3(u) for u in CLIFFORDS])
    for k in range(64):
        x = np.zeros(64, dtype=complex)
        x[k] = 1.0
        x = x.reshape(8, 8)
        clifford_avg = np.mean([u @ x @ u.conj().T for u in u3], axis=0)
        coeffs = wg @ np.array([np.trace(p.T @ x) for p in ops])
        haar = sum(c * p for c, p in zip(coeffs, ops))
        assert np.abs(clifford_avg - haar).max() < 1e-10


def test_clifford_sampling_is_uniform():
    rng = np.random.default_rng(11)
    counts = np.zeros(24, dtype=int)
    for _ in range(24000):
        u = sample_single_qubit_clifford(rng)
        counts[np.flatnonzero(np.all(np.isclose(CLIFFORDS, u), axis=(1, 2)))[0]] += 1
    assert np.all(np.abs(counts - 1000) <= 150)


def test_haar_su2():
    rng = np.random.default_rng(3)
    total = np.zeros((2, 2), dtype=complex)
    draws = 100_000
    for _ in range(draws):
        u = sample_haar_su2(rng)
        assert np.abs(u.conj().T @ u - np.eye(2)).max() < 1e-12
        total += np.outer(u[:, 0], u[:, 0].conj())
    assert np.abs(total / draws - np.eye(2) / 2).max() < 0.01


def test_born_probabilities_examples():
    eye = np.array([np.eye(2), np.eye(2)])
    p = born_probabilities(basis_state([0, 1]), eye, [1, 2])
    np.testing.assert_allclose(p, [0, 1, 0, 0], atol=1e-15)
    p = born_probabilities(basis_state([0]), LocalUnitary([HADAMARD]), [1])
    np.testing.assert_allclose(p, [0.5, 0.5], atol=1e-15)
    p = born_probabilities(make_ghz(2), eye, [1, 2])
    np.testing.assert_allclose(p, [0.5, 0, 0, 0.5], atol=1e-15)
    with pytest.raises(InvalidArgumentError):
        born_probabilities(make_ghz(2), eye, [1])
    with pytest.raises(InvalidArgumentError):
        born_probabilities(make_ghz(2), eye[:1], [3])


def test_born_probabilities_match_dense_rotation(rng):
    psi = random_pure_state(rng, 4)
    sites = [3, 1]
    us = CLIFFORDS[[5, 17]]
    p = born_probabilities(psi, us, sites)
    # rotate the full state with dense operators and marginalize
    full_u = np.kron(np.kron(np.kron(us[1], np.eye(2)), us[0]), np.eye(2))
    amps = (full_u @ psi.amplitudes).reshape(2, 2, 2, 2)
    marg = np.sum(np.abs(amps) ** 2, axis=(1, 3))  # axes (site1, site3)
    np.testing.assert_allclose(p, marg.T.reshape(-1), atol=1e-12)
    rho = psi.density_matrix()
    np.testing.assert_allclose(born_probabilities(rho, us, sites), p, atol=1e-12)


def test_generate_dataset_determinism_and_batches():
    psi = make_neel(4)
    a = generate_dataset(psi, [1, 2, 4], 50, p=3, seed=9)
    b = generate_dataset(psi, [1, 2, 4], 50, p=3, seed=9, batch_size=7)
    assert a == b
    assert a.m == 50 and a.p == 3 and a.site_list == (1, 2, 4) and a.n_sites == 4
    c = generate_dataset(psi, [1, 2, 4], 50, p=3, seed=10)
    assert not np.array_equal(a.outcomes, c.outcomes)
    # a prefix of a longer run is the shorter run
    d = generate_dataset(psi, [1, 2, 4], 80, p=3, seed=9)
    assert d.subset(range(50)) == a
    # record r is reproducible from its own substream
    x = record_rng(9, 17).random(3 + 3)
    np.testing.assert_array_equal(CLIFFORDS[(x[:3] * 24).astype(int)], a.unitaries[17])
    probs = born_probabilities(psi, a.unitaries[17], [1, 2, 4])
    cdf = np.cumsum(probs)
    cdf[-1] = 1.0
    expected = np.searchsorted(cdf, x[3:], side="right")
    np.testing.assert_array_equal(a.outcomes[17] @ np.array([4, 2, 1]), expected)


def test_reused_stream_matches_fresh_substream():
    streams = _RecordStreams(2**63 + 5)
    for index in (0, 1, 17, 2**40):
        fresh = record_rng(2**63 + 5, index)
        reused = streams(index)
        np.testing.assert_array_equal(fresh.random(7), reused.random(7))
        np.testing.assert_array_equal(fresh.normal(size=3), reused.normal(size=3))


def test_generate_dataset_outcome_frequencies(rng):
    rho = random_density_matrix(rng, 2)
    ds = generate_dataset(rho, [1, 2], 1, p=20000, ensemble="haar", seed=4)
    probs = born_probabilities(rho, ds.unitaries[0], [1, 2])
    idx = ds.outcomes[0] @ np.array([2, 1])
    freq = np.bincount(idx, minlength=4) / ds.p
    sigma = np.sqrt(probs * (1 - probs) / ds.p)
    assert np.all(np.abs(freq - probs) <= 5 * sigma + 1e-12)


def test_generate_dataset_errors():
    psi = make_ghz(3)
    with pytest.raises(InvalidArgumentError):
        generate_dataset(psi, [1, 4], 10)
    with pytest.raises(InvalidArgumentError):
        generate_dataset(psi, [1, 1], 10)
    with pytest.raises(InvalidArgumentError):
        generate_dataset(psi, [1], 0)
    with pytest.raises(InvalidArgumentError):
        generate_dataset(psi, [1], 5, ensemble="external")
    with pytest.raises(ResourceLimitError):
        generate_dataset(make_ghz(14), list(range(1, 15)) + [15], 1)


def test_dataset_roundtrip(tmp_path):
    ds = generate_dataset(make_ghz(3), [3, 1], 20, p=2, ensemble="haar", seed=5)
    path = write_dataset(ds, tmp_path / "d.jsonl")
    back = read_dataset(path)
    assert back == ds
    # rewriting gives the same bytes
    write_dataset(back, tmp_path / "e.jsonl")
    assert (tmp_path / "e.jsonl").read_bytes() == path.read_bytes()
    lines = path.read_text().splitlines()
    header = json.loads(lines[0])
    assert header == {"version": 1, "n_sites": 3, "sites": [3, 1], "ensemble": "haar", "seed": 5, "m": 20, "p": 2}


def test_hand_written_file(tmp_path):
    h = [1, 0, 0, 0, 0, 0, 1, 0]
    s = 1 / math.sqrt(2)
    had = [s, 0, s, 0, s, 0, -s, 0]
    text = "\n".join(
        [
            json.dumps({"version": 1, "n_sites": 2, "sites": [1, 2], "ensemble": "external", "seed": 0, "m": 2, "p": 1}),
            json.dumps({"r": 0, "u": [h, had], "k": ["01"]}),
            json.dumps({"r": 1, "u": [had, h], "k": ["10"]}),
        ]
    ) + "\n"
    path = tmp_path / "hand.jsonl"
    path.write_text(text)
    ds = read_dataset(path)
    assert ds.m == 2 and ds.p == 1
    np.testing.assert_allclose(ds.unitaries[0, 1], HADAMARD)
    assert ds.records[1].outcomes == ("10",)


def _lines(tmp_path):
    ds = generate_dataset(make_ghz(2), [1, 2], 3, seed=1)
    return write_dataset(ds, tmp_path / "x.jsonl").read_text().splitlines()


def test_truncated_file_is_rejected(tmp_path):
    lines = _lines(tmp_path)
    path = tmp_path / "t.jsonl"
    path.write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(DatasetFormatError):
        read_dataset(path)
    path.write_text("\n".join(lines)[:-10])
    with pytest.raises(DatasetFormatError) as exc:
        read_dataset(path)
    assert exc.value.lineno == 4


def test_malformed_records(tmp_path):
    lines = _lines(tmp_path)
    path = tmp_path / "bad.jsonl"
    bad = json.loads(lines[2])
    bad["k"] = ["0x"]
    path.write_text("\n".join(lines[:2] + [json.dumps(bad)] + lines[3:]) + "\n")
    with pytest.raises(DatasetFormatError, match="line 3"):
        read_dataset(path)
    bad = json.loads(lines[1])
    bad["u"][0][0] = 1.5
    path.write_text("\n".join(lines[:1] + [json.dumps(bad)] + lines[2:]) + "\n")
    with pytest.raises(ValidationError, match="line 2"):
        read_dataset(path)
    path.write_text("")
    with pytest.raises(DatasetFormatError):
        read_dataset(path)


def test_dataset_constructor_checks():
    u = np.broadcast_to(np.eye(2), (2, 1, 2, 2))
    with pytest.raises(InvalidArgumentError):
        MeasurementDataset(1, [1], "bogus", 0, u, np.zeros((2, 1, 1)))
    with pytest.raises(InvalidArgumentError):
        MeasurementDataset(1, [1, 2], "external", 0, u, np.zeros((2, 1, 1)))
    with pytest.raises(InvalidArgumentError):
        MeasurementDataset(1, [1], "external", 0, u, np.zeros((2, 0, 1)))
