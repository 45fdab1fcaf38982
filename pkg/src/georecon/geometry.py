"""Coordinate-space utilities: centering, Kabsch alignment, rigid-body projection and
the shared-noise coordinate triple used for pretraining."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Conformation:
    """Atomic numbers plus Cartesian coordinates (Å) of a single molecule."""

    atomic_numbers: np.ndarray
    coords: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.atomic_numbers, dtype=np.int64).reshape(-1)
        x = np.asarray(self.coords, dtype=np.float64).reshape(-1, 3)
        if len(z) < 1:
            raise ValueError("conformation needs at least one atom")
        if len(z) != len(x):
            raise ValueError(f"{len(z)} atomic numbers but {len(x)} coordinate rows")
        if np.any(z < 1):
            raise ValueError("atomic numbers must be >= 1")
        if not np.all(np.isfinite(x)):
            raise ValueError("coordinates must be finite")
        object.__setattr__(self, "atomic_numbers", z)
        object.__setattr__(self, "coords", x)

    @property
    def n_atoms(self) -> int:
        return len(self.atomic_numbers)

    def with_coords(self, coords) -> "Conformation":
        return Conformation(self.atomic_numbers, coords)


def center(conf: Conformation) -> Conformation:
    return conf.with_coords(conf.coords - conf.coords.mean(axis=0))


@dataclass(frozen=True)
class AlignmentResult:
    rotation: np.ndarray
    translation: np.ndarray
    distance: float


def kabsch_align(x, y) -> AlignmentResult:
    """Find the proper rotation R and translation t minimising ``||x - (R y + t)||_F``."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    y = np.asarray(y, dtype=np.float64).reshape(-1, 3)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if len(x) == 0:
        raise ValueError("empty coordinate sets")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite coordinates")
    xm, ym = x.mean(axis=0), y.mean(axis=0)
    xc, yc = x - xm, y - ym
    u, _, vt = np.linalg.svd(yc.T @ xc)
    d = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    t = xm - rot @ ym
    dist = float(np.linalg.norm(xc - yc @ rot.T))
    return AlignmentResult(rot, t, dist)


def procrustes_distance(x, y) -> float:
    return kabsch_align(x, y).distance


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform proper rotation from a normalised Gaussian quaternion."""
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    a, b, c, d = q
    return np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a - b * b + c * c - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a - b * b - c * c + d * d],
    ])


@dataclass(frozen=True)
class RigidProjector:
    """Orthonormal basis ``Q`` of the rigid-motion subspace; ``P = I - Q Q^T``."""

    basis: np.ndarray
    dimension: int

    @property
    def rank(self) -> int:
        return self.dimension - self.basis.shape[1]

    def matrix(self) -> np.ndarray:
        q = self.basis
        return np.eye(self.dimension) - q @ q.T

    def project(self, v) -> np.ndarray:
        return project_nonrigid(self, v)


def rigid_basis(conf: Conformation, tol: float = 1e-8) -> RigidProjector:
    x = conf.coords
    n = len(x)
    rel = x - x.mean(axis=0)
    scale = max(np.linalg.norm(rel), 1.0)
    gens = []
    for a in range(3):
        t = np.zeros((n, 3))
        t[:, a] = 1.0
        gens.append(t.reshape(-1))
    for a in range(3):
        e = np.zeros(3)
        e[a] = 1.0
        r = np.cross(e, rel).reshape(-1)
        if np.linalg.norm(r) >= tol * scale:
            gens.append(r)
    cols: list[np.ndarray] = []
    for g in gens:
        w = g.copy()
        for _ in range(2):  # re-orthogonalise once for stability
            for q in cols:
                w -= (q @ w) * q
        nw = np.linalg.norm(w)
        if nw >= tol * max(np.linalg.norm(g), 1.0):
            cols.append(w / nw)
    return RigidProjector(np.stack(cols, axis=1), 3 * n)


def project_nonrigid(proj: RigidProjector, v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    flat = v.reshape(-1)
    if flat.shape[0] != proj.dimension:
        raise ValueError(f"vector of size {flat.shape[0]} for projector of dimension {proj.dimension}")
    q = proj.basis
    return (flat - q @ (q.T @ flat)).reshape(v.shape)


@dataclass(frozen=True)
class NoiseTriple:
    """Clean, noised and rec coordinates built from one Gaussian draw.

    ``noised = clean + epsilon`` and ``rec = clean + lam * epsilon`` hold bitwise.
    """

    clean: np.ndarray
    noised: np.ndarray
    rec: np.ndarray
    epsilon: np.ndarray
    sigma: float
    lam: float = field(default=1.0)


def sample_noise_triple(conf: Conformation, sigma: float, lam: float = 1.0,
                        seed: int | np.random.Generator | None = None) -> NoiseTriple:
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    clean = conf.coords.copy()
    eps = sigma * rng.standard_normal(clean.shape)
    return NoiseTriple(clean, clean + eps, clean + lam * eps, eps, float(sigma), float(lam))
