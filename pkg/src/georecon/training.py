"""Optimisation loop, schedule, and the pretraining / finetuning / probing drivers."""
from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import Tensor
from .config import RunConfig, ScheduleConfig, config_to_dict
from .data import Corpus
from .geometry import sample_noise_triple
from .model import (denoise_head, encode, encoder_keys, init_params, init_readout, leaves, pool,
                    readout, recon_decode)
from .objectives import loss_cln, loss_nsd, loss_rec, make_report, total_loss

log = logging.getLogger(__name__)

LOSS_HEADER = ("step", "lr", "loss_nsd", "loss_rec", "loss_cln", "loss_total")
MAE_HEADER = ("epoch", "mae")


class TrainingError(RuntimeError):
    pass


class DivergenceError(TrainingError):
    def __init__(self, message, last_good: dict[str, np.ndarray] | None = None):
        super().__init__(message)
        self.last_good = last_good


# ---------------------------------------------------------------- schedule / optimiser

def lr_at(step: int, sched: ScheduleConfig) -> float:
    """Linear warmup from lr_min to the peak, half-cosine decay to lr_min, then flat."""
    if step < 0:
        raise ValueError("step must be >= 0")
    lo, hi = sched.lr_min, sched.peak_lr
    if step < sched.warmup_steps:
        return lo + (hi - lo) * step / sched.warmup_steps
    if step >= sched.cosine_length:
        return lo
    progress = (step - sched.warmup_steps) / (sched.cosine_length - sched.warmup_steps)
    return lo + (hi - lo) * (1.0 + np.cos(np.pi * progress)) / 2.0


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    lr: float = 1e-3


def optimizer_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                   state: OptimizerState, lr: float | None = None) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update.  Blocks without a gradient are left untouched."""
    for k, g in grads.items():
        if k not in params:
            raise KeyError(f"gradient for unknown parameter {k!r}")
        if np.shape(g) != np.shape(params[k]):
            raise ValueError(f"gradient shape {np.shape(g)} != parameter shape {np.shape(params[k])} for {k!r}")
        if not np.all(np.isfinite(g)):
            bad = int(np.sum(~np.isfinite(g)))
            raise TrainingError(f"non-finite gradient in {k!r} ({bad} entries); step aborted")
    lr = state.lr if lr is None else lr
    b1, b2 = state.betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    out = dict(params)
    for k, g in grads.items():
        m = state.m.get(k, np.zeros_like(g))
        v = state.v.get(k, np.zeros_like(g))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[k], state.v[k] = m, v
        out[k] = params[k] - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out


def _grads_by_name(grads: dict[Tensor, np.ndarray]) -> dict[str, np.ndarray]:
    return {t.name: g for t, g in grads.items()}


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(x) if isinstance(x, float) else x for x in r])


# ---------------------------------------------------------------- pretraining

def molecule_losses(params: dict, conf, triple, cfg: RunConfig):
    """Tensor losses (nsd, rec, cln) for one molecule; all three passes share the encoder."""
    z = conf.atomic_numbers
    node_nsd = encode(triple.noised, z, params, cfg.encoder)
    l_nsd = loss_nsd(denoise_head(node_nsd, params), triple.epsilon)
    node_cln = encode(triple.clean, z, params, cfg.encoder)
    l_cln = loss_cln(denoise_head(node_cln, params))
    g = pool(node_cln)
    node_rec = encode(triple.rec, z, params, cfg.encoder)
    l_rec = loss_rec(recon_decode(g, node_rec, params, cfg.decoder), triple.epsilon, triple.lam)
    return l_nsd, l_rec, l_cln


def pretrain_step(params: dict[str, np.ndarray], batch, cfg: RunConfig):
    """Loss report and gradients for one batch (molecule losses averaged over the batch)."""
    with ad.Tape():
        p = leaves(params)
        acc = [0.0, 0.0, 0.0]
        for conf, triple in batch:
            for i, t in enumerate(molecule_losses(p, conf, triple, cfg)):
                acc[i] = acc[i] + t
        nsd, rec, cln = (a * (1.0 / len(batch)) for a in acc)
        total = total_loss(nsd, rec, cln, cfg.weights)
        values = [float(nsd.data), float(rec.data), float(cln.data)]
        if not np.all(np.isfinite(values)):
            raise TrainingError(f"non-finite loss components (nsd, rec, cln) = {values}")
        report = make_report(float(nsd.data), float(rec.data), float(cln.data), cfg.weights)
        grads = _grads_by_name(ad.backward(ad.as_tensor(total))) if not cfg.weights.all_zero else {}
    return report, grads


@dataclass
class PretrainResult:
    params: dict[str, np.ndarray]
    log: list[tuple]
    checkpoint: Path | None = None

    def mean_total(self, lo: int, hi: int) -> float:
        return float(np.mean([r[5] for r in self.log[lo:hi]]))


def pretrain(config: RunConfig, corpus: Corpus, out_dir=None, params=None) -> PretrainResult:
    """Multi-task pretraining on the training split; deterministic in ``config.seed``."""
    train = corpus.split("train") if "train" in corpus.splits else corpus
    if len(train) == 0:
        raise TrainingError("pretraining corpus is empty")
    if config.weights.all_zero:
        raise TrainingError("all loss weights are zero")
    params = dict(params) if params is not None else init_params(config.encoder, config.decoder, config.seed)
    rng = np.random.default_rng([config.seed, 1])
    state = OptimizerState(lr=config.schedule.peak_lr)
    rows = []
    for step in range(config.total_steps):
        idx = rng.integers(0, len(train), size=config.batch_size)
        batch = [(train.molecules[i], sample_noise_triple(train.molecules[i], config.sigma, config.lam, rng))
                 for i in idx]
        lr = lr_at(step, config.schedule)
        try:
            report, grads = pretrain_step(params, batch, config)
        except TrainingError as exc:
            _save_if(out_dir, params, config, "last_good.ckpt")
            raise DivergenceError(f"step {step}: {exc}", params) from exc
        rows.append((step, float(lr), report.nsd, report.rec, report.cln, report.total))
        try:
            params = optimizer_step(params, grads, state, lr)
        except TrainingError as exc:
            _save_if(out_dir, params, config, "last_good.ckpt")
            raise DivergenceError(str(exc), params) from exc
    ckpt = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        write_csv(out_dir / "loss.csv", LOSS_HEADER, rows)
        ckpt = _save_if(out_dir, params, config, "final.ckpt")
    return PretrainResult(params, rows, ckpt)


def _save_if(out_dir, params, config, name):
    if out_dir is None:
        return None
    return checkpoint.save(Path(out_dir) / name, params, {"config": config_to_dict(config)})


# ---------------------------------------------------------------- finetuning

@dataclass
class FinetuneResult:
    params: dict[str, np.ndarray]
    log: list[tuple]
    label_mean: float
    label_std: float
    checkpoint: Path | None = None

    @property
    def final_mae(self) -> float:
        return self.log[-1][1]


def _label_stats(y):
    mu = float(np.mean(y))
    sd = float(np.std(y))
    return mu, sd if sd > 1e-12 else 1.0


def predict(params, conf, cfg: RunConfig) -> Tensor:
    return readout(pool(encode(conf.coords, conf.atomic_numbers, params, cfg.encoder)), params)


def evaluate_mae(params: dict[str, np.ndarray], corpus: Corpus, cfg: RunConfig, mu: float, sd: float) -> float:
    p = {k: Tensor(v) for k, v in params.items()}
    y = corpus.labels[cfg.target]
    pred = np.array([float(predict(p, c, cfg).data) for c in corpus.molecules])
    return float(np.mean(np.abs(pred * sd + mu - y)))


def _eval_split(corpus: Corpus) -> Corpus:
    for name in ("val", "test"):
        if name in corpus.splits and len(corpus.splits[name]):
            return corpus.split(name)
    return corpus.split("train")


def finetune(config: RunConfig, params: dict[str, np.ndarray] | None, corpus: Corpus,
             out_dir=None, epochs: int | None = None) -> FinetuneResult:
    """Train encoder plus a fresh readout on a scalar target.

    Optimiser steps total ``config.total_steps`` unless ``epochs`` is given; MAE
    on the validation split (original label units) is logged at epoch 0 and
    after every pass over the training split.
    """
    if config.target not in corpus.labels:
        raise TrainingError(f"corpus has no label {config.target!r}")
    train = corpus.split("train")
    if len(train) == 0:
        raise TrainingError("finetuning corpus has no training molecules")
    evalset = _eval_split(corpus)
    base = dict(params) if params is not None else init_params(config.encoder, config.decoder, config.seed)
    base = {k: v for k, v in base.items() if not k.startswith("out.")}
    base.update(init_readout(config.encoder.hidden_dim, seed=config.seed + 7))
    params = base
    y = train.labels[config.target]
    mu, sd = _label_stats(y)
    per_epoch = int(np.ceil(len(train) / config.batch_size))
    total = per_epoch * epochs if epochs is not None else config.total_steps
    trainable = set(encoder_keys(params)) | {k for k in params if k.startswith("out.")}
    if config.aux_denoise:
        trainable |= {k for k in params if k.startswith("dns.")}
    rng = np.random.default_rng([config.seed, 2])
    state = OptimizerState(lr=config.schedule.peak_lr)
    rows = [(0, evaluate_mae(params, evalset, config, mu, sd))]
    order = rng.permutation(len(train))
    pos = 0
    for step in range(total):
        if pos >= len(order):
            order, pos = rng.permutation(len(train)), 0
        idx = order[pos:pos + config.batch_size]
        pos += config.batch_size
        with ad.Tape():
            p = leaves(params, only=trainable)
            loss = 0.0
            for i in idx:
                conf = train.molecules[i]
                err = predict(p, conf, config) - (y[i] - mu) / sd
                loss = loss + err * err
                if config.aux_denoise:
                    tri = sample_noise_triple(conf, config.sigma, config.lam, rng)
                    node = encode(tri.noised, conf.atomic_numbers, p, config.encoder)
                    loss = loss + loss_nsd(denoise_head(node, p), tri.epsilon) * config.denoising_weight
            loss = loss * (1.0 / len(idx))
            if not np.isfinite(loss.data):
                raise DivergenceError(f"non-finite finetuning loss at step {step}", params)
            grads = _grads_by_name(ad.backward(loss))
        params = optimizer_step(params, grads, state, lr_at(step, config.schedule))
        if (step + 1) % per_epoch == 0 or step + 1 == total:
            rows.append(((step + 1) / per_epoch, evaluate_mae(params, evalset, config, mu, sd)))
    ckpt = None
    if out_dir is not None:
        write_csv(Path(out_dir) / "finetune_mae.csv", MAE_HEADER, rows)
        ckpt = checkpoint.save(Path(out_dir) / "finetuned.ckpt", params,
                               {"config": config_to_dict(config), "label_mean": mu, "label_std": sd})
    return FinetuneResult(params, rows, mu, sd, ckpt)


# ---------------------------------------------------------------- linear probing

@dataclass
class ProbeResult:
    log: list[tuple]  # (epoch, mae, ||w||)
    w: np.ndarray
    b: float

    @property
    def final_mae(self) -> float:
        return self.log[-1][1]

    @property
    def curve(self) -> list[tuple]:
        return [(e, m) for e, m, _ in self.log]


def graph_features(params: dict[str, np.ndarray], corpus: Corpus, cfg: RunConfig) -> np.ndarray:
    p = {k: Tensor(v) for k, v in params.items()}
    if not corpus.molecules:
        return np.zeros((0, cfg.encoder.hidden_dim))
    return np.stack([pool(encode(c.coords, c.atomic_numbers, p, cfg.encoder)).data for c in corpus.molecules])


def fit_linear_probe(feat_train, y_train, feat_eval, y_eval, steps: int, batch_size: int,
                     schedule: ScheduleConfig, seed: int = 0, eval_every: int | None = None) -> ProbeResult:
    """Train ``<w, g> + b`` by Adam on standardised features; MAE in label units."""
    fmu = feat_train.mean(axis=0)
    fsd = feat_train.std(axis=0)
    fsd = np.where(fsd > 1e-12, fsd, 1.0)
    xs = (feat_train - fmu) / fsd
    xe = (feat_eval - fmu) / fsd
    mu, sd = _label_stats(y_train)
    ys = (y_train - mu) / sd
    params = {"w": np.zeros(xs.shape[1]), "b": np.zeros(())}
    state = OptimizerState(lr=schedule.peak_lr)
    rng = np.random.default_rng([seed, 3])
    n = len(xs)
    eval_every = eval_every or max(1, int(np.ceil(n / batch_size)))

    def record(epoch):
        w_raw = params["w"] / fsd
        b_raw = float(params["b"]) - float(w_raw @ fmu)
        pred = (xe @ params["w"] + params["b"]) * sd + mu
        mae = float(np.mean(np.abs(pred - y_eval)))
        return (epoch, mae, float(np.linalg.norm(w_raw * sd))), w_raw * sd, b_raw * sd + mu

    rows = [record(0)[0]]
    for step in range(steps):
        idx = rng.integers(0, n, size=min(batch_size, n))
        with ad.Tape():
            w = Tensor(params["w"], requires_grad=True, name="w")
            b = Tensor(params["b"], requires_grad=True, name="b")
            err = ad.matmul(Tensor(xs[idx]), ad.reshape(w, (-1, 1))) + ad.broadcast_to(b, (len(idx), 1)) \
                - ys[idx].reshape(-1, 1)
            loss = ad.mean(err * err)
            grads = _grads_by_name(ad.backward(loss))
        params = optimizer_step(params, grads, state, lr_at(step, schedule))
        if (step + 1) % eval_every == 0 or step + 1 == steps:
            rows.append(record((step + 1) / eval_every)[0])
    _, w_final, b_final = record(0)
    return ProbeResult(rows, w_final, b_final)


def linear_probe(config: RunConfig, params: dict[str, np.ndarray], corpus: Corpus, out_dir=None,
                 steps: int | None = None) -> ProbeResult:
    """Frozen encoder, trainable affine head on the pooled embedding."""
    if config.target not in corpus.labels:
        raise TrainingError(f"corpus has no label {config.target!r}")
    train, evalset = corpus.split("train"), _eval_split(corpus)
    ft = graph_features(params, train, config)
    fe = graph_features(params, evalset, config)
    res = fit_linear_probe(ft, train.labels[config.target], fe, evalset.labels[config.target],
                           steps or config.total_steps, config.batch_size, config.schedule, config.seed)
    if out_dir is not None:
        write_csv(Path(out_dir) / "probe_mae.csv", ("epoch", "mae", "w_norm"), res.log)
    return res


# ---------------------------------------------------------------- ablations

ABLATION_AXES = {"lambda": "lam", "decoder_depth": "depth", "w_rec": "w_rec", "w_cln": "w_cln"}
ABLATION_HEADER = ("lambda", "decoder_depth", "w_rec", "w_cln", "pretrain_loss", "finetune_mae")


def apply_cell(base: RunConfig, cell: dict) -> RunConfig:
    cfg = base
    for key, value in cell.items():
        if key == "lambda":
            cfg = replace(cfg, lam=float(value))
        elif key == "decoder_depth":
            cfg = replace(cfg, decoder=replace(cfg.decoder, depth=int(value)))
        elif key in ("w_rec", "w_cln", "w_nsd"):
            cfg = replace(cfg, weights=replace(cfg.weights, **{key: float(value)}))
        else:
            raise ValueError(f"unknown ablation axis {key!r}; choose from {sorted(ABLATION_AXES)}")
    return cfg


def run_cell(cfg: RunConfig, corpus: Corpus, finetune_steps: int):
    pre = pretrain(cfg, corpus)
    ft = finetune(replace(cfg, mode="finetune", total_steps=finetune_steps), pre.params, corpus)
    return pre, ft


def ablation_grid(base: RunConfig, axes: dict[str, list], corpus: Corpus, finetune_steps: int = 50,
                  out_path=None) -> list[tuple]:
    """One pretrain+finetune run per grid cell, all sharing ``base.seed``."""
    if not axes or any(len(v) == 0 for v in axes.values()):
        raise ValueError("ablation grid is empty")
    names = list(axes)
    rows = []
    for values in itertools.product(*(axes[k] for k in names)):
        cfg = apply_cell(base, dict(zip(names, values)))
        pre, ft = run_cell(cfg, corpus, finetune_steps)
        final_loss = pre.mean_total(max(0, len(pre.log) - 10), len(pre.log))
        rows.append((cfg.lam, cfg.decoder.depth, cfg.weights.w_rec, cfg.weights.w_cln, final_loss, ft.final_mae))
        log.info("ablation cell %s: loss %.4g mae %.4g", dict(zip(names, values)), final_loss, ft.final_mae)
    if out_path is not None:
        write_csv(out_path, ABLATION_HEADER, rows)
    return rows
