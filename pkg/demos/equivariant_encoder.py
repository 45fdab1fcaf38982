"""
Symmetry of the encoder
=======================

Rotate and translate a molecule, then compare the graph embedding
and the predicted noise before and after.
"""
import numpy as np

from georecon.data import synth_corpus
from georecon.geometry import random_rotation
from georecon.model import EncoderConfig, denoise_head, encode, init_params, leaves, pool

enc = EncoderConfig(num_layers=2, hidden_dim=32)
params = leaves(init_params(enc, seed=0), requires_grad=False)
mol = synth_corpus(seed=4, n_molecules=1, atoms_range=(7, 7)).molecules[0]

node = encode(mol.coords, mol.atomic_numbers, params, enc)
g, eps_hat = pool(node).data, denoise_head(node, params).data
print("embedding size:", g.shape, " noise prediction:", eps_hat.shape)

rng = np.random.default_rng(0)
for trial in range(3):
    r, t = random_rotation(rng), rng.uniform(-3, 3, 3)
    moved = encode(mol.coords @ r.T + t, mol.atomic_numbers, params, enc)
    dg = np.linalg.norm(pool(moved).data - g) / np.linalg.norm(g)
    de = np.linalg.norm(denoise_head(moved, params).data - eps_hat @ r.T) / np.linalg.norm(eps_hat)
    print(f"motion {trial}: embedding change {dg:.1e}, rotated-noise mismatch {de:.1e}")

# relabelling atoms permutes node rows and leaves g untouched
perm = rng.permutation(mol.n_atoms)
shuffled = encode(mol.coords[perm], mol.atomic_numbers[perm], params, enc)
print("pooled g after permutation differs by", np.abs(pool(shuffled).data - g).max())
