"""
Linear probing a frozen encoder
===============================

Fit an affine head on pooled embeddings to predict the toy energy,
once from a briefly pretrained encoder and once from random weights.
"""
from georecon.config import RunConfig, ScheduleConfig
from georecon.data import synth_corpus
from georecon.model import EncoderConfig, init_params
from georecon.objectives import GEORECON
from georecon.training import fit_linear_probe, graph_features, pretrain

corpus, held_out = synth_corpus(seed=0, n_molecules=128), synth_corpus(seed=1, n_molecules=32)
train = corpus.split("train")
cfg = RunConfig(seed=0, total_steps=500, encoder=EncoderConfig(num_layers=2, hidden_dim=16, num_rbf=16),
                weights=GEORECON)
sched = ScheduleConfig(peak_lr=1e-2, lr_min=1e-5, warmup_steps=50, cosine_length=2000)

for name, params in (("pretrained", pretrain(cfg, corpus).params), ("random", init_params(cfg.encoder, seed=0))):
    res = fit_linear_probe(graph_features(params, train, cfg), train.labels["energy"],
                           graph_features(params, held_out, cfg), held_out.labels["energy"], 2000, 32, sched)
    print(f"{name:>10}: MAE {res.log[0][1]:.3f} -> {res.final_mae:.3f}, |w| = {res.log[-1][2]:.3f}")
