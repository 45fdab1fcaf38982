"""Pretraining losses and the score-matching reference quantities."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class LossWeights:
    w_nsd: float = 1.0
    w_rec: float = 0.45
    w_cln: float = 0.1

    def __post_init__(self):
        if min(self.w_nsd, self.w_rec, self.w_cln) < 0:
            raise ValueError(f"loss weights must be non-negative: {self}")

    @property
    def all_zero(self) -> bool:
        return self.w_nsd == 0 and self.w_rec == 0 and self.w_cln == 0


COORD = LossWeights(1.0, 0.0, 0.0)
GEORECON = LossWeights(1.0, 0.45, 0.1)


@dataclass(frozen=True)
class LossReport:
    nsd: float
    rec: float
    cln: float
    total: float


def _shape_check(a: Tensor, b, what: str):
    if tuple(a.shape) != tuple(np.shape(b)):
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {np.shape(b)}")


def loss_nsd(eps_hat, epsilon) -> Tensor:
    """Mean squared error over all 3N noise components."""
    eps_hat = ad.as_tensor(eps_hat)
    eps = ad.as_tensor(epsilon)
    _shape_check(eps_hat, eps.data, "loss_nsd")
    diff = eps_hat - eps
    return ad.mean(diff * diff)


def loss_rec(eps_hat_rec, epsilon, lam: float) -> Tensor:
    eps_hat_rec = ad.as_tensor(eps_hat_rec)
    target = lam * np.asarray(ad.as_tensor(epsilon).data)
    _shape_check(eps_hat_rec, target, "loss_rec")
    diff = eps_hat_rec - target
    return ad.mean(diff * diff)


def loss_cln(eps_hat_cln) -> Tensor:
    eps_hat_cln = ad.as_tensor(eps_hat_cln)
    return ad.mean(eps_hat_cln * eps_hat_cln)


def total_loss(nsd, rec, cln, weights: LossWeights):
    """Weighted sum; works on tensors (for backprop) or floats."""
    if min(weights.w_nsd, weights.w_rec, weights.w_cln) < 0:
        raise ValueError("negative loss weight")
    parts = [(weights.w_nsd, nsd), (weights.w_rec, rec), (weights.w_cln, cln)]
    total = 0.0
    for w, v in parts:
        if w != 0:
            total = total + v * w
    return total


def make_report(nsd: float, rec: float, cln: float, weights: LossWeights) -> LossReport:
    for v in (nsd, rec, cln):
        if not np.isfinite(v):
            raise ValueError("non-finite loss component")
    return LossReport(nsd, rec, cln, float(total_loss(nsd, rec, cln, weights)))


# ---------------------------------------------------------------- score matching

def dsm_target(clean, noised, sigma: float) -> np.ndarray:
    """Denoising score-matching target ``(clean - noised) / sigma**2``."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    clean = np.asarray(clean, dtype=np.float64)
    noised = np.asarray(noised, dtype=np.float64)
    if clean.shape != noised.shape:
        raise ValueError(f"shape mismatch {clean.shape} vs {noised.shape}")
    return (clean - noised) / sigma ** 2


@dataclass(frozen=True)
class ScoreOracle:
    """Equal-weight isotropic Gaussian mixture around a set of conformations."""

    centers: np.ndarray  # (n_centers, N, 3)
    sigma: float

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=np.float64)
        if c.ndim == 2:
            c = c[None]
        if c.ndim != 3 or c.shape[0] < 1 or c.shape[-1] != 3:
            raise ValueError("centers must have shape (n_centers, N, 3)")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        object.__setattr__(self, "centers", c)

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Draw ``n`` noisy points; returns (points, index of the generating center)."""
        idx = rng.integers(0, len(self.centers), size=n)
        pts = self.centers[idx] + self.sigma * rng.standard_normal((n,) + self.centers.shape[1:])
        return pts, idx


def analytic_mixture_score(oracle: ScoreOracle, x) -> np.ndarray:
    """Gradient of the log mixture density at ``x`` (N×3 or batch of them)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    xb = x[None] if single else x
    diff = oracle.centers[None] - xb[:, None]  # (B, C, N, 3)
    logw = -0.5 * np.sum(diff ** 2, axis=(2, 3)) / oracle.sigma ** 2
    logw -= logw.max(axis=1, keepdims=True)
    w = np.exp(logw)
    w /= w.sum(axis=1, keepdims=True)
    score = np.einsum("bc,bcij->bij", w, diff) / oracle.sigma ** 2
    return score[0] if single else score
