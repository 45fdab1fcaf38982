"""
Local sensitivity of the embedding
==================================

Estimate how strongly the pooled embedding reacts to non-rigid
coordinate changes, then map its response to moving one atom.
"""
import numpy as np

from georecon.config import RunConfig
from georecon.data import synth_corpus
from georecon.model import EncoderConfig, init_params
from georecon.probes import encoder_embed_fn, heatmap, lipschitz_power, lipschitz_report

cfg = RunConfig(encoder=EncoderConfig(num_layers=2, hidden_dim=16))
embed = encoder_embed_fn(init_params(cfg.encoder, seed=0), cfg)
corpus = synth_corpus(seed=2, n_molecules=16)

# the estimate is non-decreasing in the number of steps
est = lipschitz_power(embed, corpus.molecules[0], steps=10)
print("estimates by step:", np.round(np.sqrt(np.maximum(est.rayleigh, 0)), 5))
plain = lipschitz_power(embed, corpus.molecules[0], steps=10, method="power")
print("plain power method:", np.round(np.sqrt(np.maximum(plain.rayleigh, 0)), 5))

report = lipschitz_report(embed, corpus, (5, 15, 25))
for row in report.table():
    print(row[0], ["%.4g" % v for v in row[1:]])

grid = heatmap(embed, corpus.molecules[0], atom=0, extent=0.5, resolution=7)
print("embedding change, atom 0 moved in the xy plane:")
print(np.array2string(grid.values, precision=3))
