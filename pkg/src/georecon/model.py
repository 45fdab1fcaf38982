"""Equivariant message-passing encoder, pooling and the pretraining/readout heads.

Node state is a pair ``(h, V)``: invariant scalars of shape (N, d) and
equivariant vectors of shape (N, 3, d).  Messages are built from species
embeddings and a Gaussian radial basis of interatomic distances; vector
updates combine neighbour vectors and unit bond directions, both scaled by
learned invariant filters, so every layer commutes with rotations and
translations by construction.

Vector outputs (noise predictions) use a gated readout: an invariant MLP emits
one gate per channel and the gates contract linearly mixed vector channels
into a single 3-vector per atom.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 4
    hidden_dim: int = 64
    cutoff: float = 5.0
    max_z: int = 100
    num_rbf: int = 32

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if self.hidden_dim < 1:
            raise ValueError("hidden_dim must be >= 1")
        if not self.cutoff > 0:
            raise ValueError("cutoff must be positive")
        if self.num_rbf < 1:
            raise ValueError("num_rbf must be >= 1")


@dataclass(frozen=True)
class DecoderConfig:
    depth: int = 3
    width: int | None = None  # defaults to the encoder hidden_dim

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("decoder depth must be >= 1")


@dataclass
class NodeEmbedding:
    scalars: Tensor  # (N, d), invariant
    vectors: Tensor  # (N, 3, d), equivariant

    @property
    def n_atoms(self) -> int:
        return self.scalars.shape[0]


# ---------------------------------------------------------------- parameters

def _glorot(rng, fan_in, fan_out, shape=None):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, shape or (fan_in, fan_out))


def init_params(enc: EncoderConfig, dec: DecoderConfig | None = None, seed: int = 0,
                readout: bool = False) -> dict[str, np.ndarray]:
    """Seeded parameter blocks for the encoder and heads, in a fixed order."""
    dec = dec or DecoderConfig()
    rng = np.random.default_rng(seed)
    d, k = enc.hidden_dim, enc.num_rbf
    p: dict[str, np.ndarray] = {"embed": 0.1 * rng.standard_normal((enc.max_z + 1, d))}
    for l in range(enc.num_layers):
        pre = f"layer{l}."
        p[pre + "phi1.w"] = _glorot(rng, d, d)
        p[pre + "phi1.b"] = np.zeros(d)
        p[pre + "phi2.w"] = _glorot(rng, d, 3 * d)
        p[pre + "phi2.b"] = np.zeros(3 * d)
        p[pre + "filter.w"] = _glorot(rng, k, 3 * d)
        p[pre + "filter.b"] = np.zeros(3 * d)
        p[pre + "upd.wu"] = _glorot(rng, d, d)
        p[pre + "upd.wv"] = _glorot(rng, d, d)
        p[pre + "upd.mlp1.w"] = _glorot(rng, 2 * d, d)
        p[pre + "upd.mlp1.b"] = np.zeros(d)
        p[pre + "upd.mlp2.w"] = _glorot(rng, d, 3 * d)
        p[pre + "upd.mlp2.b"] = np.zeros(3 * d)
    p["dns.gate1.w"] = _glorot(rng, d, d)
    p["dns.gate1.b"] = np.zeros(d)
    p["dns.gate2.w"] = _glorot(rng, d, d)
    p["dns.gate2.b"] = np.zeros(d)
    p["dns.vec.w"] = _glorot(rng, d, d)
    width = dec.width or d
    dims = [2 * d] + [width] * (dec.depth - 1) + [d]
    for j in range(dec.depth):
        p[f"rec.mlp{j}.w"] = _glorot(rng, dims[j], dims[j + 1])
        p[f"rec.mlp{j}.b"] = np.zeros(dims[j + 1])
    p["rec.vec.w"] = _glorot(rng, d, d)
    if readout:
        p.update(init_readout(d, seed=seed + 1))
    return p


def init_readout(d: int, seed: int = 0, hidden: int | None = None) -> dict[str, np.ndarray]:
    """Fresh two-layer scalar readout used for finetuning."""
    rng = np.random.default_rng(seed)
    hidden = hidden or d
    return {
        "out.l0.w": _glorot(rng, d, hidden),
        "out.l0.b": np.zeros(hidden),
        "out.l1.w": _glorot(rng, hidden, 1),
        "out.l1.b": np.zeros(1),
    }


def encoder_keys(params) -> list[str]:
    return [k for k in params if k == "embed" or k.startswith("layer")]


def leaves(params: dict[str, np.ndarray], requires_grad=True, only=None) -> dict[str, Tensor]:
    """Wrap parameter arrays as tensors; ``only`` restricts which blocks are tracked."""
    out = {}
    for k, v in params.items():
        track = requires_grad and (only is None or k in only)
        out[k] = Tensor(v, requires_grad=track, name=k)
    return out


# ---------------------------------------------------------------- building blocks

def dense(x: Tensor, w, b=None) -> Tensor:
    y = ad.matmul(x, w)
    if b is None:
        return y
    return y + ad.broadcast_to(b, y.shape)


def _expand(t: Tensor, shape_in, shape_out) -> Tensor:
    return ad.broadcast_to(ad.reshape(t, shape_in), shape_out)


def _pair_geometry(coords: Tensor, cfg: EncoderConfig):
    n = coords.shape[0]
    xi = _expand(coords, (n, 1, 3), (n, n, 3))
    xj = _expand(coords, (1, n, 3), (n, n, 3))
    rel = xj - xi
    # unit offset on the diagonal keeps sqrt and division regular; those pairs are masked
    d2 = ad.sum(rel * rel, axis=-1) + np.eye(n)
    dist = ad.sqrt(d2)
    unit = rel / _expand(dist, (n, n, 1), (n, n, 3))
    mask = (dist.data < cfg.cutoff) & ~np.eye(n, dtype=bool)
    env = (ad.cos(dist * (np.pi / cfg.cutoff)) + 1.0) * 0.5 * mask.astype(np.float64)
    centers = cfg.cutoff * np.arange(1, cfg.num_rbf + 1) / cfg.num_rbf
    gamma = 0.5 * (cfg.num_rbf / cfg.cutoff) ** 2
    diff = _expand(dist, (n, n, 1), (n, n, cfg.num_rbf)) - np.broadcast_to(centers, (n, n, cfg.num_rbf))
    rbf = ad.exp(diff * diff * (-gamma))
    return unit, env, rbf


def encode(coords, atomic_numbers, params: dict, cfg: EncoderConfig) -> NodeEmbedding:
    """Run the message-passing stack on one molecule."""
    coords = ad.as_tensor(coords)
    z = np.asarray(atomic_numbers, dtype=np.int64).reshape(-1)
    n = len(z)
    if n == 0:
        raise ValueError("cannot encode an empty molecule")
    if coords.shape != (n, 3):
        raise ValueError(f"coords shape {coords.shape} does not match {n} atoms")
    if not np.all(np.isfinite(coords.data)):
        raise ValueError("non-finite coordinates")
    if z.min() < 1 or z.max() > cfg.max_z:
        raise ValueError(f"atomic number outside embeddable range 1..{cfg.max_z}")
    d = cfg.hidden_dim
    unit, env, rbf = _pair_geometry(coords, cfg)
    env3 = _expand(env, (n, n, 1), (n, n, 3 * d))
    unit4 = _expand(unit, (n, n, 3, 1), (n, n, 3, d))

    h = ad.take(params["embed"], z, axis=0)
    vec = Tensor(np.zeros((n, 3, d)))
    for l in range(cfg.num_layers):
        pre = f"layer{l}."
        phi = dense(ad.silu(dense(h, params[pre + "phi1.w"], params[pre + "phi1.b"])),
                    params[pre + "phi2.w"], params[pre + "phi2.b"])
        filt = dense(rbf, params[pre + "filter.w"], params[pre + "filter.b"]) * env3
        msg = _expand(phi, (1, n, 3 * d), (n, n, 3 * d)) * filt
        h = h + ad.sum(msg[:, :, :d], axis=1)
        gate_v = _expand(msg[:, :, d:2 * d], (n, n, 1, d), (n, n, 3, d))
        gate_r = _expand(msg[:, :, 2 * d:], (n, n, 1, d), (n, n, 3, d))
        vj = _expand(vec, (1, n, 3, d), (n, n, 3, d))
        vec = vec + ad.sum(gate_v * vj + gate_r * unit4, axis=1)

        u = ad.matmul(vec, params[pre + "upd.wu"])
        w = ad.matmul(vec, params[pre + "upd.wv"])
        wn = ad.norm(w, axis=1, eps=1e-8)
        a = dense(ad.silu(dense(ad.concat([h, wn], axis=1), params[pre + "upd.mlp1.w"],
                                params[pre + "upd.mlp1.b"])),
                  params[pre + "upd.mlp2.w"], params[pre + "upd.mlp2.b"])
        a_vv, a_sv, a_ss = a[:, :d], a[:, d:2 * d], a[:, 2 * d:]
        vec = vec + _expand(a_vv, (n, 1, d), (n, 3, d)) * u
        h = h + a_sv * ad.sum(u * w, axis=1) + a_ss
    return NodeEmbedding(h, vec)


def pool(node: NodeEmbedding) -> Tensor:
    """Mean of the invariant node rows: the graph embedding g."""
    return ad.mean(node.scalars, axis=0)


def _gated_vectors(gates: Tensor, vectors: Tensor, w_vec) -> Tensor:
    n, _, d = vectors.shape
    mixed = ad.matmul(vectors, w_vec)
    return ad.sum(_expand(gates, (n, 1, d), (n, 3, d)) * mixed, axis=2)


def denoise_head(node: NodeEmbedding, params: dict, prefix: str = "dns") -> Tensor:
    """Per-atom noise prediction (N, 3) from a node embedding."""
    gates = dense(ad.silu(dense(node.scalars, params[prefix + ".gate1.w"], params[prefix + ".gate1.b"])),
                  params[prefix + ".gate2.w"], params[prefix + ".gate2.b"])
    return _gated_vectors(gates, node.vectors, params[prefix + ".vec.w"])


def recon_decode(g: Tensor, node_rec: NodeEmbedding, params: dict, config: DecoderConfig) -> Tensor:
    """Predict the scaled noise from rec-pass nodes conditioned on the clean graph embedding."""
    g = ad.as_tensor(g)
    n, d = node_rec.scalars.shape
    w0 = params["rec.mlp0.w"]
    if g.shape != (d,) or ad.as_tensor(w0).shape[0] != 2 * d:
        raise ValueError(f"graph embedding of shape {g.shape} incompatible with decoder input width")
    x = ad.concat([_expand(g, (1, d), (n, d)), node_rec.scalars], axis=1)
    for j in range(config.depth):
        x = dense(x, params[f"rec.mlp{j}.w"], params[f"rec.mlp{j}.b"])
        if j < config.depth - 1:
            x = ad.silu(x)
    return _gated_vectors(x, node_rec.vectors, params["rec.vec.w"])


def linear_head(g, w, b) -> Tensor:
    g, w = ad.as_tensor(g), ad.as_tensor(w)
    if g.shape != w.shape or g.ndim != 1:
        raise ValueError(f"linear head: g {g.shape} vs w {w.shape}")
    return ad.sum(g * w) + b


def readout(g: Tensor, params: dict) -> Tensor:
    """Two-layer scalar readout on the graph embedding (finetuning head)."""
    g = ad.reshape(ad.as_tensor(g), (1, -1))
    hid = ad.silu(dense(g, params["out.l0.w"], params["out.l0.b"]))
    return ad.reshape(dense(hid, params["out.l1.w"], params["out.l1.b"]), ())


def readout_weights(params: dict) -> list[np.ndarray]:
    return [np.asarray(params[k]) for k in sorted(k for k in params if k.startswith("out.") and k.endswith(".w"))]


# ---------------------------------------------------------------- spectral diagnostics

@dataclass
class SpectralFactors:
    product: float
    complexity: float
    norms: list[float] = field(default_factory=list)

    @property
    def defined(self) -> bool:
        return np.isfinite(self.complexity)


def spectral_norm(w, iters: int = 200, seed: int = 0, tol: float = 1e-13) -> float:
    """Largest singular value by power iteration on ``W^T W``."""
    w = np.asarray(w, dtype=np.float64)
    w = w.reshape(w.shape[0], -1) if w.ndim != 2 else w
    if not np.any(w):
        return 0.0
    v = np.random.default_rng(seed).standard_normal(w.shape[1])
    v /= np.linalg.norm(v)
    s = 0.0
    for _ in range(iters):
        u = w.T @ (w @ v)
        nu = np.linalg.norm(u)
        if nu == 0:
            return 0.0
        v = u / nu
        s_new = np.sqrt(nu)
        if abs(s_new - s) <= tol * s_new:
            s = s_new
            break
        s = s_new
    return float(np.linalg.norm(w @ v))


def spectral_factors(weights) -> SpectralFactors:
    """Product of layer spectral norms and the Frobenius/spectral complexity factor."""
    norms = [spectral_norm(w) for w in weights]
    prod = float(np.prod(norms)) if norms else 1.0
    if any(s == 0 for s in norms):
        return SpectralFactors(prod, float("nan"), norms)
    comp = float(np.sqrt(sum(np.sum(np.asarray(w) ** 2) / s ** 2 for w, s in zip(weights, norms))))
    return SpectralFactors(prod, comp, norms)


# ---------------------------------------------------------------- convenience wrapper

@dataclass
class GeoReconModel:
    """Bundles configs and parameters; all methods are pure in the parameters."""

    encoder: EncoderConfig
    decoder: DecoderConfig
    params: dict[str, np.ndarray]

    @classmethod
    def create(cls, encoder=None, decoder=None, seed: int = 0, readout: bool = False):
        encoder = encoder or EncoderConfig()
        decoder = decoder or DecoderConfig()
        return cls(encoder, decoder, init_params(encoder, decoder, seed, readout=readout))

    def embed_fn(self):
        """Coordinates (flat 3N or N×3) → pooled g, with parameters frozen."""
        params = {k: Tensor(v) for k, v in self.params.items()}

        def build(z):
            def f(x):
                x = ad.as_tensor(x)
                coords = ad.reshape(x, (len(z), 3)) if x.shape != (len(z), 3) else x
                return pool(encode(coords, z, params, self.encoder))
            return f
        return build

    def graph_embedding(self, conf) -> np.ndarray:
        params = {k: Tensor(v) for k, v in self.params.items()}
        return pool(encode(conf.coords, conf.atomic_numbers, params, self.encoder)).data.copy()
