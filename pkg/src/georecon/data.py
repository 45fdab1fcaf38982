"""XYZ input/output and the synthetic Lennard-Jones equilibrium corpus."""
from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .geometry import Conformation

ELEMENTS = (
    "H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co Ni Cu Zn "
    "Ga Ge As Se Br Kr Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te I Xe Cs Ba La Ce "
    "Pr Nd Pm Sm Eu Gd Tb Dy Ho Er Tm Yb Lu Hf Ta W Re Os Ir Pt Au Hg Tl Pb Bi Po At Rn "
    "Fr Ra Ac Th Pa U Np Pu Am Cm Bk Cf Es Fm Md No Lr Rf Db Sg Bh Hs Mt Ds Rg Cn Nh Fl "
    "Mc Lv Ts Og"
).split()
SYMBOL_TO_Z = {s.lower(): i + 1 for i, s in enumerate(ELEMENTS)}


class XYZError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass
class Corpus:
    molecules: list[Conformation]
    labels: dict[str, np.ndarray] = field(default_factory=dict)
    splits: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.molecules)
        for name, vals in self.labels.items():
            vals = np.asarray(vals, dtype=np.float64)
            if len(vals) != n:
                raise ValueError(f"label {name!r} has {len(vals)} values for {n} molecules")
            self.labels[name] = vals
        if self.splits:
            idx = np.concatenate([np.asarray(v, dtype=np.int64) for v in self.splits.values()])
            if len(idx) != n or len(np.unique(idx)) != n or (n and (idx.min() < 0 or idx.max() >= n)):
                raise ValueError("splits must be disjoint and cover every molecule exactly once")
        else:
            self.splits = {"train": np.arange(n)}

    def __len__(self):
        return len(self.molecules)

    def split(self, name: str) -> "Corpus":
        idx = np.asarray(self.splits.get(name, []), dtype=np.int64)
        return Corpus([self.molecules[i] for i in idx],
                      {k: v[idx] for k, v in self.labels.items()},
                      {"train": np.arange(len(idx))})

    def subset(self, idx) -> "Corpus":
        idx = np.asarray(idx, dtype=np.int64)
        return Corpus([self.molecules[i] for i in idx], {k: v[idx] for k, v in self.labels.items()})


# ---------------------------------------------------------------- XYZ

def _atomic_number(tok: str, lineno: int) -> int:
    if tok.isdigit():
        z = int(tok)
        if 1 <= z <= len(ELEMENTS):
            return z
    else:
        z = SYMBOL_TO_Z.get(tok.lower())
        if z is not None:
            return z
    raise XYZError(lineno, f"unknown element symbol {tok!r}")


def parse_xyz(text: str, with_comments: bool = False):
    """Parse one or more concatenated XYZ frames."""
    lines = text.splitlines()
    frames, comments = [], []
    i = 0
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        count_line = i + 1
        try:
            n = int(lines[i].split()[0])
        except ValueError:
            raise XYZError(count_line, f"expected an atom count, got {lines[i].strip()!r}") from None
        if n < 1:
            raise XYZError(count_line, f"atom count must be positive, got {n}")
        comment = lines[i + 1] if i + 1 < len(lines) else ""
        z, xyz = [], []
        j = i + 2
        while len(z) < n and j < len(lines) and lines[j].strip():
            parts = lines[j].split()
            if len(parts) < 4:
                if len(z) >= 1 and len(parts) == 1 and parts[0].isdigit():
                    break  # start of the next frame
                raise XYZError(j + 1, f"expected 'Symbol x y z', got {lines[j].strip()!r}")
            z.append(_atomic_number(parts[0], j + 1))
            try:
                xyz.append([float(v) for v in parts[1:4]])
            except ValueError:
                raise XYZError(j + 1, f"malformed coordinate in {lines[j].strip()!r}") from None
            j += 1
        if len(z) != n:
            raise XYZError(max(j, i + 2), f"declared {n} atoms, found {len(z)}")
        coords = np.array(xyz)
        if not np.all(np.isfinite(coords)):
            raise XYZError(j, "non-finite coordinate")
        frames.append(Conformation(np.array(z), coords))
        comments.append(comment)
        i = j
    return (frames, comments) if with_comments else frames


def write_xyz(molecules, comments=None) -> str:
    if isinstance(molecules, Corpus):
        molecules = molecules.molecules
    out = []
    for k, conf in enumerate(molecules):
        out.append(str(conf.n_atoms))
        out.append(comments[k] if comments else "")
        for z, (x, y, w) in zip(conf.atomic_numbers, conf.coords):
            out.append(f"{ELEMENTS[z - 1]} {x:.9f} {y:.9f} {w:.9f}")
    return "\n".join(out) + ("\n" if out else "")


_KV = re.compile(r"(\w+)=(\S+)")


def corpus_to_xyz(corpus: Corpus) -> str:
    split_of = {}
    for name, idx in corpus.splits.items():
        for i in idx:
            split_of[int(i)] = name
    comments = []
    for i in range(len(corpus)):
        parts = [f"{k}={v[i]:.17g}" for k, v in corpus.labels.items()]
        parts.append(f"split={split_of.get(i, 'train')}")
        comments.append(" ".join(parts))
    return write_xyz(corpus.molecules, comments)


def corpus_from_xyz(text: str) -> Corpus:
    """Inverse of :func:`corpus_to_xyz`; plain XYZ files become an unlabelled train split."""
    frames, comments = parse_xyz(text, with_comments=True)
    fields = [dict(_KV.findall(c)) for c in comments]
    keys = [k for k in (fields[0] if fields else {}) if k != "split"]
    labels = {}
    for k in keys:
        try:
            labels[k] = np.array([float(f[k]) for f in fields])
        except (KeyError, ValueError):
            continue
    splits: dict[str, list[int]] = {}
    for i, f in enumerate(fields):
        splits.setdefault(f.get("split", "train"), []).append(i)
    return Corpus(frames, labels, {k: np.array(v) for k, v in splits.items()})


# ---------------------------------------------------------------- toy physics

@dataclass(frozen=True)
class ToyPotential:
    """Pairwise Lennard-Jones with Lorentz-Berthelot mixing.

    ``params`` maps atomic number to ``(well_depth, radius)``; ``charges`` maps
    atomic number to the partial charge used for the dipole label.
    """

    params: dict = field(default_factory=lambda: {1: (0.5, 1.0), 6: (1.0, 1.4), 8: (0.8, 1.25)})
    charges: dict = field(default_factory=lambda: {1: 0.1, 6: 0.0, 8: -0.1})

    def __post_init__(self):
        for z, (eps, r) in self.params.items():
            if not (eps > 0 and r > 0):
                raise ValueError(f"species {z}: well depth and radius must be positive")

    def pair_tables(self, z):
        eps = np.array([self.params[int(a)][0] for a in z])
        rad = np.array([self.params[int(a)][1] for a in z])
        return np.sqrt(eps[:, None] * eps[None]), 0.5 * (rad[:, None] + rad[None])

    def energy_forces(self, z, x) -> tuple[float, np.ndarray]:
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        eps, sig = self.pair_tables(z)
        rel = x[:, None] - x[None]
        r2 = np.sum(rel ** 2, axis=-1)
        n = len(x)
        iu = ~np.eye(n, dtype=bool)
        r2 = np.where(iu, r2, 1.0)
        s6 = (sig ** 2 / r2) ** 3
        e = np.where(iu, 4 * eps * (s6 * s6 - s6), 0.0)
        # dE/dr * 1/r for each pair
        coef = np.where(iu, 4 * eps * (-12 * s6 * s6 + 6 * s6) / r2, 0.0)
        grad = np.sum(coef[:, :, None] * rel, axis=1)
        return 0.5 * float(e.sum()), -grad

    def energy(self, z, x) -> float:
        return self.energy_forces(z, x)[0]

    def dipole(self, z, x) -> float:
        q = np.array([self.charges.get(int(a), 0.0) for a in z])
        return float(np.linalg.norm(q @ np.asarray(x).reshape(-1, 3)))


def relax(pot: ToyPotential, z, x0, fmax: float = 1e-3, max_iter: int = 5000):
    """Minimise the toy potential; returns (coords, max |force component|, converged)."""
    z = np.asarray(z)

    def fun(flat):
        e, f = pot.energy_forces(z, flat)
        return e, -f.reshape(-1)

    res = minimize(fun, np.asarray(x0, dtype=np.float64).reshape(-1), jac=True, method="L-BFGS-B",
                   options={"maxiter": max_iter, "gtol": fmax * 0.1, "ftol": 0.0, "maxcor": 30})
    x = res.x.reshape(-1, 3)
    x = x - x.mean(axis=0)
    _, f = pot.energy_forces(z, x)
    fm = float(np.abs(f).max()) if np.all(np.isfinite(f)) else float("inf")
    return x, fm, bool(fm < fmax)


def _place(rng, rad, max_tries=200):
    n = len(rad)
    box = 0.9 * rad.mean() * 2 ** (1 / 6) * max(n, 2) ** (1 / 3)
    pts = []
    for i in range(n):
        for _ in range(max_tries):
            p = rng.uniform(-box, box, 3)
            if all(np.linalg.norm(p - q) > 0.85 * 0.5 * (rad[i] + rad[j]) for j, q in enumerate(pts)):
                pts.append(p)
                break
        else:
            pts.append(rng.uniform(-2 * box, 2 * box, 3))
    return np.array(pts)


def synth_molecule(rng: np.random.Generator, n_atoms: int, species, pot: ToyPotential,
                   fmax: float = 1e-3, max_retries: int = 10):
    best = None
    for _ in range(max_retries):
        z = rng.choice(np.asarray(species), size=n_atoms)
        rad = np.array([pot.params[int(a)][1] for a in z])
        x, fm, ok = relax(pot, z, _place(rng, rad), fmax=fmax)
        if not np.all(np.isfinite(x)):
            continue
        if best is None or fm < best[2]:
            best = (z, x, fm)
        if ok:
            break
    if best is None:
        raise RuntimeError("relaxation failed repeatedly")
    return best


def synth_corpus(seed: int = 0, n_molecules: int = 256, atoms_range=(4, 10), species=(1, 6, 8),
                 potential: ToyPotential | None = None) -> Corpus:
    """Random Lennard-Jones clusters relaxed to equilibrium, labelled with energy and dipole.

    Each molecule gets an independent child seed so generation order does not
    matter.  Splits are 80/10/10 by a seeded shuffle.
    """
    lo, hi = atoms_range
    if n_molecules < 1:
        raise ValueError("n_molecules must be >= 1")
    if not (2 <= lo <= hi <= 16):
        raise ValueError("atoms_range must lie within [2, 16]")
    pot = potential or ToyPotential()
    root = np.random.SeedSequence(seed)
    mols, energy, dipole, fmax = [], [], [], []
    for child in root.spawn(n_molecules):
        rng = np.random.default_rng(child)
        n = int(rng.integers(lo, hi + 1))
        z, x, fm = synth_molecule(rng, n, species, pot)
        mols.append(Conformation(z, x))
        energy.append(pot.energy(z, x))
        dipole.append(pot.dipole(z, x))
        fmax.append(fm)
    order = np.random.default_rng([seed, 0x5EED]).permutation(n_molecules)
    n_train = int(round(0.8 * n_molecules))
    n_val = int(round(0.1 * n_molecules))
    splits = {"train": np.sort(order[:n_train]), "val": np.sort(order[n_train:n_train + n_val]),
              "test": np.sort(order[n_train + n_val:])}
    return Corpus(mols, {"energy": np.array(energy), "dipole": np.array(dipole),
                         "max_force": np.array(fmax)}, splits)
