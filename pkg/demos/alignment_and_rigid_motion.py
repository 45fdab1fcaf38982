"""
Alignment, rigid motions and shared-noise triples
=================================================
"""
import numpy as np

from georecon.geometry import (Conformation, kabsch_align, procrustes_distance, random_rotation, rigid_basis,
                               sample_noise_triple)

rng = np.random.default_rng(1)
x = rng.standard_normal((6, 3))

# a rotated and shifted copy aligns back to zero distance
r = random_rotation(rng)
y = x @ r.T + np.array([2.0, -1.0, 0.5])
fit = kabsch_align(y, x)
print("distance after alignment:", fit.distance)
print("recovered rotation error:", np.abs(fit.rotation - r).max())

# a textbook case: stretching one bond
print("stretched bond distance:", procrustes_distance([[0, 0, 0], [1, 0, 0]], [[0, 0, 0], [0, 2, 0]]),
      "(sqrt(0.5) =", np.sqrt(0.5), ")")

# alignment never increases the plain coordinate distance
eps = 0.3 * rng.standard_normal(x.shape)
print("aligned", procrustes_distance(x, x + eps), "<= raw", np.linalg.norm(eps))

# the projector removes translations and infinitesimal rotations
mol = Conformation([6, 1, 1, 8, 1, 1], x)
proj = rigid_basis(mol)
print("rigid directions:", proj.basis.shape[1], " non-rigid rank:", proj.rank)
shift = np.tile([1.0, 0.0, 0.0], 6)
print("projected translation norm:", np.linalg.norm(proj.project(shift)))

# one noise draw, three coordinate sets
tri = sample_noise_triple(mol, sigma=0.04, lam=1.5, seed=0)
print("rec - clean == 1.5 * eps:", np.array_equal(tri.rec, tri.clean + 1.5 * tri.epsilon))
