"""Measurement instruments: local Lipschitz estimates, perturbation heatmaps,
linear-probe noise robustness, NTK linearisation tracking and a score-matching check.

An *embedding function* here is any callable ``f(coords, atomic_numbers)`` taking
an (N, 3) :class:`~georecon.autodiff.Tensor` and returning a 1-D tensor; it must be
built from autodiff primitives so Jacobian products are available.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import RunConfig, ScheduleConfig
from .geometry import Conformation, procrustes_distance, project_nonrigid, rigid_basis
from .model import encode, leaves, pool, readout
from .objectives import ScoreOracle, analytic_mixture_score
from .training import OptimizerState, lr_at, optimizer_step, write_csv

DEFAULT_STEPS = (5, 15, 25)


def encoder_embed_fn(params: dict[str, np.ndarray], cfg: RunConfig):
    """Pooled graph embedding of the encoder with parameters held constant."""
    frozen = {k: Tensor(v) for k, v in params.items()}

    def f(coords, z):
        return pool(encode(coords, z, frozen, cfg.encoder))
    return f


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("GEORECON_THREADS", "1")))
    except ValueError:
        return 1


def _map(fn, items):
    n = _threads()
    if n == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(n) as pool_:
        return list(pool_.map(fn, items))


# ---------------------------------------------------------------- Lipschitz

class UndefinedLipschitz(ValueError):
    pass


@dataclass
class PowerIteration:
    value: float
    rayleigh: list[float]  # Rayleigh quotient of P J^T J P after each step

    def at(self, steps: int) -> float:
        return float(np.sqrt(max(self.rayleigh[steps - 1], 0.0)))


def lipschitz_power(embed_fn, conf: Conformation, steps: int = 25, seed: int = 0,
                    method: str = "lanczos") -> PowerIteration:
    """Estimate ``||J_f(x) P||_2`` using only Jacobian-vector products.

    Each step applies ``P J^T J P`` once.  ``method="power"`` is the plain power
    method; ``"lanczos"`` keeps the iterates orthonormal and reports the largest
    Ritz value of the Krylov subspace, which needs far fewer steps when the top
    two singular values are close.  Both sequences are non-decreasing.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if method not in ("power", "lanczos"):
        raise ValueError(f"unknown method {method!r}")
    proj = rigid_basis(conf)
    if proj.rank == 0:
        raise UndefinedLipschitz("no non-rigid degrees of freedom")
    z = conf.atomic_numbers
    n = conf.n_atoms
    lin = ad.linearize(lambda x: ad.reshape(ad.as_tensor(embed_fn(ad.reshape(x, (n, 3)), z)), (-1,)),
                       conf.coords.reshape(-1))
    rng = np.random.default_rng(seed)
    for _ in range(10):
        v = rng.standard_normal(3 * n)
        v = project_nonrigid(proj, v / np.linalg.norm(v))
        nv = np.linalg.norm(v)
        if nv > 1e-8:
            v /= nv
            break
    else:
        raise UndefinedLipschitz("could not draw a non-rigid start vector")

    def op(u):
        return project_nonrigid(proj, lin.vjp(lin.jvp(project_nonrigid(proj, u))))

    rq = _lanczos(op, v, steps) if method == "lanczos" else _power(op, v, steps)
    return PowerIteration(float(np.sqrt(max(rq[-1], 0.0))), rq)


def _power(op, v, steps):
    rq = []
    for _ in range(steps):
        w = op(v)
        rq.append(float(v @ w))
        nw = np.linalg.norm(w)
        if nw == 0.0:
            rq.extend([0.0] * (steps - len(rq)))
            break
        v = w / nw
    return rq


def _lanczos(op, v, steps):
    basis = [v]
    alphas, betas = [], []
    rq = []
    while len(rq) < steps:
        q = basis[-1]
        w = op(q)
        alphas.append(float(q @ w))
        for _ in range(2):  # full reorthogonalisation
            for b in basis:
                w -= (b @ w) * b
        t = np.diag(alphas) + np.diag(betas, 1) + np.diag(betas, -1)
        rq.append(max(float(np.linalg.eigvalsh(t)[-1]), rq[-1] if rq else -np.inf))
        beta = float(np.linalg.norm(w))
        if beta <= 1e-12 * max(np.abs(t).max(), 1e-300) or len(basis) == len(v):
            # Krylov space exhausted: the estimate is exact from here on
            rq.extend([rq[-1]] * (steps - len(rq)))
            break
        betas.append(beta)
        basis.append(w / beta)
    return rq


@dataclass
class LipschitzReport:
    steps: tuple[int, ...]
    values: dict[int, np.ndarray]  # steps -> per-molecule L(x)

    def median(self, s: int) -> float:
        return float(np.median(self.values[s]))

    def p95(self, s: int) -> float:
        return float(np.percentile(self.values[s], 95))

    def rows(self):
        for s in self.steps:
            for i, v in enumerate(self.values[s]):
                yield (i, s, float(v))

    def table(self):
        return [("median",) + tuple(self.median(s) for s in self.steps),
                ("p95",) + tuple(self.p95(s) for s in self.steps)]

    def write(self, out_dir) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        a = out_dir / "lipschitz.csv"
        b = out_dir / "lipschitz_table.csv"
        write_csv(a, ("molecule_id", "steps", "L"), list(self.rows()))
        write_csv(b, ("stat",) + tuple(f"steps_{s}" for s in self.steps), self.table())
        return a, b


def lipschitz_report(embed_fn, corpus, step_counts=DEFAULT_STEPS, seed: int = 0,
                     method: str = "lanczos") -> LipschitzReport:
    """Per-molecule estimates at each step count; one power run per molecule, read at each count."""
    molecules = corpus.molecules if hasattr(corpus, "molecules") else list(corpus)
    if not molecules:
        raise ValueError("empty corpus")
    steps = tuple(sorted(int(s) for s in step_counts))
    seeds = np.random.SeedSequence(seed).spawn(len(molecules))

    def one(item):
        conf, ss = item
        return lipschitz_power(embed_fn, conf, steps[-1], seed=np.random.default_rng(ss).integers(2**63),
                               method=method)

    runs = _map(one, list(zip(molecules, seeds)))
    values = {s: np.array([r.at(s) for r in runs]) for s in steps}
    return LipschitzReport(steps, values)


# ---------------------------------------------------------------- heatmap

@dataclass
class HeatmapGrid:
    atom: int
    axis_u: np.ndarray
    axis_v: np.ndarray
    offsets: np.ndarray
    values: np.ndarray  # values[i, j] at displacement offsets[i]*u + offsets[j]*v

    def rows(self):
        for i, du in enumerate(self.offsets):
            for j, dv in enumerate(self.offsets):
                yield (float(du), float(dv), float(self.values[i, j]))

    def write(self, path) -> Path:
        write_csv(path, ("du", "dv", "delta_norm"), list(self.rows()))
        return Path(path)


def heatmap(embed_fn, conf: Conformation, atom: int, axis_u=(1.0, 0.0, 0.0), axis_v=(0.0, 1.0, 0.0),
            extent: float = 1.0, resolution: int = 41) -> HeatmapGrid:
    """Norm change of the embedding when one atom is displaced over a 2-D grid."""
    if not 0 <= atom < conf.n_atoms:
        raise IndexError(f"atom index {atom} outside 0..{conf.n_atoms - 1}")
    u = np.asarray(axis_u, dtype=np.float64)
    v = np.asarray(axis_v, dtype=np.float64)
    if abs(np.linalg.norm(u) - 1) > 1e-9 or abs(np.linalg.norm(v) - 1) > 1e-9 or abs(u @ v) > 1e-9:
        raise ValueError("axes must be orthonormal")
    if resolution < 1 or resolution % 2 == 0:
        raise ValueError("resolution must be a positive odd number so the grid contains the origin")
    z = conf.atomic_numbers
    base = np.asarray(ad.as_tensor(embed_fn(Tensor(conf.coords), z)).data).copy()
    offsets = np.linspace(-extent, extent, resolution)
    mid = resolution // 2
    offsets[mid] = 0.0
    vals = np.zeros((resolution, resolution))
    for i, a in enumerate(offsets):
        for j, b in enumerate(offsets):
            if i == mid and j == mid:
                continue
            x = conf.coords.copy()
            x[atom] += a * u + b * v
            g = ad.as_tensor(embed_fn(Tensor(x), z)).data
            vals[i, j] = np.linalg.norm(g - base)
    return HeatmapGrid(atom, u, v, offsets, vals)


# ---------------------------------------------------------------- noise robustness

@dataclass
class RobustnessReport:
    deltas: np.ndarray
    bounds: np.ndarray
    procrustes: np.ndarray
    violations: int

    @property
    def max_delta(self) -> float:
        return float(self.deltas.max())

    @property
    def mean_delta(self) -> float:
        return float(self.deltas.mean())

    @property
    def violation_fraction(self) -> float:
        return self.violations / len(self.deltas)


def noise_robustness_check(w, bound_b: float, embed_fn, lipschitz: float, conf: Conformation,
                           sigma: float, trials: int = 1000, seed: int = 0, b: float = 0.0) -> RobustnessReport:
    """Compare |probe(f(x+eps)) - probe(f(x))| with ``B * L_f * ||eps||``.

    ``L_f`` is a local estimate, so violations at large noise are expected
    and are counted rather than raised.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    w = np.asarray(w, dtype=np.float64)
    z = conf.atomic_numbers
    rng = np.random.default_rng(seed)

    def probe(x):
        return float(w @ np.asarray(ad.as_tensor(embed_fn(Tensor(x), z)).data).reshape(-1)) + b

    y0 = probe(conf.coords)
    deltas, bounds, dists = np.zeros(trials), np.zeros(trials), np.zeros(trials)
    for t in range(trials):
        eps = sigma * rng.standard_normal(conf.coords.shape)
        x = conf.coords + eps
        deltas[t] = abs(probe(x) - y0)
        bounds[t] = bound_b * lipschitz * np.linalg.norm(eps)
        dists[t] = procrustes_distance(conf.coords, x)
    viol = int(np.sum(deltas > bounds * (1 + 1e-12)))
    return RobustnessReport(deltas, bounds, dists, viol)


# ---------------------------------------------------------------- NTK linearisation

@dataclass
class LinearizationReport:
    pred_cosine: list[float]      # per step, step 0 first
    grad_alignment: list[float]   # per step t >= 1: cos(grad_t, grad_{t-1})
    range_len: int
    diverged: bool = False

    def ranges(self):
        out = []
        n = len(self.pred_cosine)
        for lo in range(0, max(n - 1, 1), self.range_len):
            hi = min(lo + self.range_len, n - 1) if n > 1 else 0
            pc = self.pred_cosine[lo:hi + 1] if n > 1 else self.pred_cosine
            ga = self.grad_alignment[lo:hi] if self.grad_alignment else [1.0]
            out.append((f"{lo}-{hi}", float(np.mean(pc)), float(np.mean(ga)) if ga else 1.0))
        return out

    def write(self, path) -> Path:
        write_csv(path, ("step_range", "pred_cosine", "grad_alignment"), self.ranges())
        return Path(path)


def _cosine(a, b) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 and nb == 0:
        return 1.0
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def ntk_check(config: RunConfig, params0: dict[str, np.ndarray], batch, targets, n_steps: int = 100,
              lr: float = 1e-4, range_len: int = 100, predict_fn=None) -> LinearizationReport:
    """Train the scalar predictor on ``batch`` and compare with its first-order expansion.

    The linear model is ``f(theta0) + <grad_theta f(theta0), theta - theta0>``;
    per-sample parameter gradients at theta0 are computed once, which is the
    parameter-space JVP evaluated for each displacement without materialising
    a Jacobian over the batch.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    predict_fn = predict_fn or (lambda p, conf: readout(pool(encode(conf.coords, conf.atomic_numbers, p,
                                                                      config.encoder)), p))
    targets = np.asarray(targets, dtype=np.float64)
    theta0 = {k: np.array(v, copy=True) for k, v in params0.items()}
    keys = list(theta0)

    f0, jac0 = [], []
    for conf in batch:
        with ad.Tape():
            p = leaves(theta0)
            out = predict_fn(p, conf)
            g = {t.name: v for t, v in ad.backward(out).items()}
        f0.append(float(out.data))
        jac0.append({k: g.get(k) for k in keys})
    f0 = np.array(f0)

    def full_pred(params):
        p = {k: Tensor(v) for k, v in params.items()}
        return np.array([float(predict_fn(p, c).data) for c in batch])

    def lin_pred(params):
        out = f0.copy()
        for i, jg in enumerate(jac0):
            out[i] += sum(float(np.sum(jg[k] * (params[k] - theta0[k]))) for k in keys if jg[k] is not None)
        return out

    params = dict(theta0)
    state = OptimizerState(lr=lr)
    pred_cos, align = [1.0], []
    prev = None
    diverged = False
    for step in range(n_steps):
        with ad.Tape():
            p = leaves(params)
            loss = 0.0
            for conf, y in zip(batch, targets):
                err = predict_fn(p, conf) - y
                loss = loss + err * err
            loss = loss * (1.0 / len(batch))
            grads = {t.name: v for t, v in ad.backward(loss).items()}
        if not np.isfinite(loss.data):
            diverged = True
            break
        flat = np.concatenate([grads[k].reshape(-1) for k in keys if k in grads])
        if prev is not None:
            align.append(_cosine(flat, prev))
        prev = flat
        params = optimizer_step(params, grads, state, lr)
        pred_cos.append(_cosine(full_pred(params) - f0, lin_pred(params) - f0))
    return LinearizationReport(pred_cos, align, range_len, diverged)


# ---------------------------------------------------------------- score matching

@dataclass
class ScoreCheck:
    cosine_mean: float
    cosines: np.ndarray
    final_loss: float
    oracle: ScoreOracle = field(repr=False)


def _mlp_init(rng, sizes):
    p = {}
    for j, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = np.sqrt(6.0 / (a + b))
        p[f"l{j}.w"] = rng.uniform(-bound, bound, (a, b))
        p[f"l{j}.b"] = np.zeros(b)
    return p


def _mlp(p, x: Tensor, depth: int) -> Tensor:
    for j in range(depth):
        x = ad.matmul(x, p[f"l{j}.w"])
        x = x + ad.broadcast_to(p[f"l{j}.b"], x.shape)
        if j < depth - 1:
            x = ad.silu(x)
    return x


def verify_score(n_centers: int = 2, n_atoms: int = 2, sigma: float = 0.3, steps: int = 3000,
                 batch_size: int = 128, hidden: int = 64, lr: float = 3e-3, n_eval: int = 500,
                 seed: int = 0, separation: float = 1.0) -> ScoreCheck:
    """Train a small noise predictor on a Gaussian mixture and compare ``-eps_hat/sigma**2``
    with the analytic mixture score on fresh samples."""
    rng = np.random.default_rng(seed)
    base = rng.standard_normal((n_atoms, 3))
    centers = np.stack([base + separation * rng.standard_normal((n_atoms, 3)) for _ in range(n_centers)])
    oracle = ScoreOracle(centers, sigma)
    dim = 3 * n_atoms
    shift = centers.reshape(n_centers, -1).mean(axis=0)
    scale = float(centers.reshape(n_centers, -1).std() + sigma)
    params = _mlp_init(rng, [dim, hidden, hidden, dim])
    sched = ScheduleConfig(lr, 1e-6, steps // 20, steps)
    state = OptimizerState(lr=lr)
    loss_val = np.nan
    for step in range(steps):
        idx = rng.integers(0, n_centers, size=batch_size)
        eps = sigma * rng.standard_normal((batch_size, dim))
        noisy = centers.reshape(n_centers, -1)[idx] + eps
        with ad.Tape():
            p = {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}
            pred = _mlp(p, Tensor((noisy - shift) / scale), 3)
            diff = pred - eps / sigma
            loss = ad.mean(diff * diff)
            grads = {t.name: g for t, g in ad.backward(loss).items()}
        loss_val = float(loss.data)
        params = optimizer_step(params, grads, state, lr_at(step, sched))
    pts, _ = oracle.sample(n_eval, rng)
    flat = pts.reshape(n_eval, -1)
    eps_hat = sigma * _mlp({k: Tensor(v) for k, v in params.items()}, Tensor((flat - shift) / scale), 3).data
    est = -eps_hat / sigma ** 2
    true = analytic_mixture_score(oracle, pts).reshape(n_eval, -1)
    cos = np.array([_cosine(a, b) for a, b in zip(est, true)])
    return ScoreCheck(float(cos.mean()), cos, loss_val, oracle)
