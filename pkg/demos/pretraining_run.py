"""
A short pretraining run
=======================

Denoising alone against denoising plus graph-conditioned reconstruction,
on a small relaxed Lennard-Jones corpus.  Takes a couple of minutes.
"""
import numpy as np

from georecon.config import RunConfig
from georecon.data import synth_corpus
from georecon.model import EncoderConfig
from georecon.objectives import COORD, GEORECON
from georecon.training import pretrain

corpus = synth_corpus(seed=0, n_molecules=64)
print(len(corpus), "molecules; max residual force", corpus.labels["max_force"].max())

base = RunConfig(seed=0, total_steps=300, encoder=EncoderConfig(num_layers=2, hidden_dim=16, num_rbf=16))
for name, weights in (("denoise only", COORD), ("with reconstruction", GEORECON)):
    run = pretrain(base.with_(weights=weights), corpus)
    log = np.array(run.log)
    print(f"{name:>20}: total loss {run.mean_total(0, 10):.5f} -> {run.mean_total(290, 300):.5f}; "
          f"final nsd {log[-10:, 2].mean():.5f}, rec {log[-10:, 3].mean():.5f}, cln {log[-10:, 4].mean():.5f}")
