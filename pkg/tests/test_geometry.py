import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize
from scipy.spatial.transform import Rotation

from georecon.geometry import (Conformation, center, kabsch_align, procrustes_distance, project_nonrigid,
                               random_rotation, rigid_basis, sample_noise_triple)

from conftest import random_molecule


def brute_force_distance(x, y, n_rot=10_000, seed=0, polish=True):
    """Best centred Frobenius residual over sampled rotations, optionally refined
    by derivative-free search over a rotation vector. No SVD involved."""
    xc, yc = x - x.mean(0), y - y.mean(0)
    rots = Rotation.random(n_rot, random_state=seed).as_matrix()
    res = np.linalg.norm(xc[None] - np.einsum("rij,nj->rni", rots, yc), axis=(1, 2))
    best = int(np.argmin(res))
    if not polish:
        return float(res[best])
    r0 = Rotation.from_matrix(rots[best]).as_rotvec()
    obj = lambda rv: np.linalg.norm(xc - yc @ Rotation.from_rotvec(rv).as_matrix().T)
    out = minimize(obj, r0, method="Nelder-Mead", options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 4000})
    return float(min(out.fun, res[best]))


def test_conformation_validation():
    with pytest.raises(ValueError):
        Conformation([], np.zeros((0, 3)))
    with pytest.raises(ValueError):
        Conformation([0], [[0, 0, 0]])
    with pytest.raises(ValueError):
        Conformation([1], [[np.nan, 0, 0]])
    with pytest.raises(ValueError):
        Conformation([1, 1], [[0, 0, 0]])


def test_center_examples():
    c = center(Conformation([1, 1], [[1, 0, 0], [3, 0, 0]]))
    np.testing.assert_array_equal(c.coords, [[-1, 0, 0], [1, 0, 0]])
    np.testing.assert_array_equal(center(Conformation([8], [[5, 5, 5]])).coords, [[0, 0, 0]])
    rng = np.random.default_rng(0)
    m = center(random_molecule(rng, 6))
    np.testing.assert_allclose(center(m).coords, m.coords, atol=1e-12)


def test_kabsch_exact_rigid_match():
    rng = np.random.default_rng(1)
    for _ in range(10):
        x = rng.standard_normal((7, 3))
        r, t = random_rotation(rng), rng.standard_normal(3)
        res = kabsch_align(x @ r.T + t, x)
        assert res.distance <= 1e-8
        np.testing.assert_allclose(res.rotation.T @ res.rotation, np.eye(3), atol=1e-10)
        assert np.linalg.det(res.rotation) == pytest.approx(1.0, abs=1e-10)


def test_kabsch_sqrt_half_example():
    x = np.array([[0.0, 0, 0], [1, 0, 0]])
    y = np.array([[0.0, 0, 0], [0, 2, 0]])
    assert kabsch_align(x, y).distance == pytest.approx(np.sqrt(0.5), abs=1e-12)
    # frozen oracle: unpolished sampling over 10^6 rotations
    assert brute_force_distance(x, y, n_rot=1_000_000, polish=False) == pytest.approx(0.70711, abs=1e-3)


def test_kabsch_reflection_is_not_allowed():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((6, 3))
    mirrored = x * np.array([1.0, 1.0, -1.0])
    res = kabsch_align(x, mirrored)
    assert np.linalg.det(res.rotation) == pytest.approx(1.0, abs=1e-10)
    assert res.distance > 1e-3
    assert res.distance == pytest.approx(brute_force_distance(x, mirrored), abs=1e-6)


def test_kabsch_rejects_bad_input():
    with pytest.raises(ValueError):
        kabsch_align(np.zeros((2, 3)), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        kabsch_align(np.zeros((0, 3)), np.zeros((0, 3)))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 8))
def test_procrustes_pseudometric(seed, n):
    rng = np.random.default_rng(seed)
    a, b, c = (rng.standard_normal((n, 3)) for _ in range(3))
    assert procrustes_distance(a, a) <= 1e-10
    assert procrustes_distance(a, b) == pytest.approx(procrustes_distance(b, a), abs=1e-9)
    assert procrustes_distance(a, c) <= procrustes_distance(a, b) + procrustes_distance(b, c) + 1e-9


def test_rigid_basis_counts():
    tri = Conformation([1, 6, 8], [[0, 0, 0], [1.1, 0, 0], [0.3, 0.9, 0]])
    p = rigid_basis(tri)
    assert p.basis.shape[1] == 6 and p.rank == 3
    dimer = Conformation([1, 1], [[0, 0, 0], [0.74, 0, 0]])
    assert rigid_basis(dimer).basis.shape[1] == 5
    assert rigid_basis(Conformation([1], [[1, 2, 3]])).basis.shape[1] == 3


def test_rigid_projector_properties():
    rng = np.random.default_rng(3)
    m = random_molecule(rng, 6)
    p = rigid_basis(m)
    q = p.basis
    np.testing.assert_allclose(q.T @ q, np.eye(q.shape[1]), atol=1e-10)
    pm = p.matrix()
    assert np.linalg.norm(pm @ pm - pm) <= 1e-10
    tx = np.tile([1.0, 0, 0], m.n_atoms)
    assert np.linalg.norm(project_nonrigid(p, tx)) <= 1e-10
    rel = m.coords - m.coords.mean(0)
    for axis in np.eye(3):
        assert np.linalg.norm(p.project(np.cross(axis, rel))) <= 1e-10
    v = rng.standard_normal(3 * m.n_atoms)
    pv = p.project(v)
    np.testing.assert_allclose(p.project(pv), pv, atol=1e-10)
    np.testing.assert_allclose(p.project(pm @ v), pm @ v, atol=1e-10)
    with pytest.raises(ValueError):
        p.project(np.ones(5))


def test_noise_triple_identities():
    rng = np.random.default_rng(4)
    m = random_molecule(rng, 5)
    t1 = sample_noise_triple(m, 0.04, 1.0, seed=9)
    assert np.array_equal(t1.rec, t1.noised)
    assert np.array_equal(t1.noised, t1.clean + t1.epsilon)
    t15 = sample_noise_triple(m, 0.04, 1.5, seed=9)
    assert np.array_equal(t15.rec, t15.clean + 1.5 * t15.epsilon)
    np.testing.assert_allclose(t15.rec - t15.clean, 1.5 * (t15.noised - t15.clean), rtol=1e-12, atol=1e-15)
    for bad in [dict(sigma=0.0), dict(sigma=0.04, lam=0.0)]:
        with pytest.raises(ValueError):
            sample_noise_triple(m, **bad)


def test_noise_variance():
    m = Conformation(np.ones(100_000 // 3 + 1, dtype=int), np.zeros((100_000 // 3 + 1, 3)))
    eps = sample_noise_triple(m, 0.04, seed=0).epsilon.reshape(-1)[:100_000]
    assert abs(eps.var() / 0.0016 - 1.0) <= 0.02


def test_alignment_only_decreases_distance():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((6, 3))
    for _ in range(1000):
        eps = rng.standard_normal((6, 3)) * rng.uniform(0.01, 1.0)
        assert procrustes_distance(x, x + eps) <= np.linalg.norm(eps) + 1e-12
