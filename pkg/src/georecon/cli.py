"""Command-line driver: ``georecon <subcommand> [options]``.

Exit status is 0 on success, 1 on usage errors and 2 on runtime failures.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import ConfigError, RunConfig, config_from_dict, config_to_dict, load_config
from .data import XYZError, corpus_from_xyz, corpus_to_xyz, synth_corpus
from .geometry import Conformation
from .model import init_params
from .objectives import LossWeights
from .probes import (encoder_embed_fn, heatmap, lipschitz_report, ntk_check, verify_score)
from .training import TrainingError, ablation_grid, finetune, linear_probe, pretrain

log = logging.getLogger("georecon")

SUBCOMMANDS = ("synth", "pretrain", "finetune", "probe-lipschitz", "probe-heatmap", "probe-linear",
               "probe-ntk", "verify-score", "ablate")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _int_list(s: str) -> list[int]:
    try:
        return [int(x) for x in s.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from None


def _weights(s: str) -> LossWeights:
    try:
        vals = [float(x) for x in s.split(",")]
        if len(vals) != 3:
            raise ValueError
        return LossWeights(*vals)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected three non-negative numbers 'w_nsd,w_rec,w_cln', got {s!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="georecon", description="Graph-level reconstruction pretraining toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="SUBCOMMAND", parser_class=_Parser)

    def common(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", type=Path, help="'key = value' run configuration")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", type=Path, default=Path("."), help="output file or directory")
        return sp

    sp = common("synth", "generate a relaxed Lennard-Jones corpus as XYZ")
    sp.add_argument("--n", type=int, default=256, help="number of molecules")
    sp.add_argument("--atoms", type=_int_list, default=[4, 10], help="min,max atoms per molecule")

    for name, help_ in (("pretrain", "multi-task pretraining"), ("ablate", "ablation grid")):
        sp = common(name, help_)
        sp.add_argument("--dataset", type=Path)
        sp.add_argument("--steps", type=int)
        sp.add_argument("--lambda", dest="lam", type=float)
        sp.add_argument("--weights", type=_weights)
        if name == "ablate":
            sp.add_argument("--grid", required=True,
                            help="axes like 'lambda=1.0,1.5;decoder_depth=3,4,5'")
            sp.add_argument("--finetune-steps", type=int, default=50)

    sp = common("finetune", "finetune encoder plus readout on a scalar label")
    sp.add_argument("--checkpoint", type=Path)
    sp.add_argument("--dataset", type=Path)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--target")

    sp = common("probe-lipschitz", "local non-rigid Lipschitz constants")
    sp.add_argument("--checkpoint", type=Path)
    sp.add_argument("--dataset", type=Path)
    sp.add_argument("--steps", type=_int_list, default=[5, 15, 25])
    sp.add_argument("--method", choices=("lanczos", "power"), default="lanczos")
    sp.add_argument("--split", default="test")
    sp.add_argument("--max-molecules", type=int)

    sp = common("probe-heatmap", "embedding change under single-atom displacement")
    sp.add_argument("--checkpoint", type=Path)
    sp.add_argument("--dataset", type=Path)
    sp.add_argument("--molecule", type=int, default=0)
    sp.add_argument("--atom", type=int, default=0)
    sp.add_argument("--resolution", type=int, default=41)
    sp.add_argument("--range", dest="extent", type=float, default=1.0)

    sp = common("probe-linear", "linear probe on the frozen pooled embedding")
    sp.add_argument("--checkpoint", type=Path, help="omit for a randomly initialised encoder")
    sp.add_argument("--dataset", type=Path)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--target")

    sp = common("probe-ntk", "linearisation check during early finetuning")
    sp.add_argument("--checkpoint", type=Path)
    sp.add_argument("--dataset", type=Path)
    sp.add_argument("--steps", type=int, default=100)
    sp.add_argument("--lr", type=float, default=1e-4)
    sp.add_argument("--batch", type=int, default=8)
    sp.add_argument("--target")

    sp = common("verify-score", "denoising vs analytic mixture score")
    sp.add_argument("--steps", type=int, default=3000)
    sp.add_argument("--centers", type=int, default=2)
    return p


# ---------------------------------------------------------------- helpers

def _config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "lam", None) is not None:
        cfg = replace(cfg, lam=args.lam)
    if getattr(args, "weights", None) is not None:
        cfg = replace(cfg, weights=args.weights)
    if getattr(args, "target", None):
        cfg = replace(cfg, target=args.target)
    return cfg


def _corpus(args, cfg: RunConfig):
    path = getattr(args, "dataset", None) or (Path(cfg.dataset) if cfg.dataset else None)
    if path is None:
        log.info("no dataset given; synthesising 256 molecules with seed %d", cfg.seed)
        return synth_corpus(cfg.seed, 256)
    return corpus_from_xyz(Path(path).read_text())


def _load_model(args, cfg: RunConfig):
    """Parameters and config, taking architecture from the checkpoint when one is given."""
    if getattr(args, "checkpoint", None):
        params, meta = checkpoint.load(args.checkpoint)
        if "config" in meta:
            saved = config_from_dict(meta["config"])
            cfg = replace(cfg, encoder=saved.encoder, decoder=saved.decoder)
        return params, cfg
    return init_params(cfg.encoder, cfg.decoder, cfg.seed), cfg


def _outdir(path: Path) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    return path


def _manifest(out: Path, command: str, cfg: RunConfig, **extra):
    data = {"command": command, "config": config_to_dict(cfg)}
    data.update(extra)
    (out / f"{command}.json").write_text(json.dumps(data, indent=2, sort_keys=True, default=str))


def _eval_molecules(corpus, split: str, limit: int | None):
    if split != "all" and split in corpus.splits and len(corpus.splits[split]):
        corpus = corpus.split(split)
    mols = corpus.molecules
    return mols[:limit] if limit else mols


# ---------------------------------------------------------------- commands

def cmd_synth(args):
    cfg = _config(args)
    lo, hi = (args.atoms + args.atoms)[:2] if len(args.atoms) == 1 else args.atoms[:2]
    corpus = synth_corpus(cfg.seed, args.n, (lo, hi))
    out = args.out if args.out.suffix else args.out / "corpus.xyz"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(corpus_to_xyz(corpus))
    print(f"wrote {len(corpus)} molecules to {out}")


def cmd_pretrain(args):
    cfg = _config(args)
    if args.steps is not None:
        cfg = replace(cfg, total_steps=args.steps)
    corpus = _corpus(args, cfg)
    out = _outdir(args.out)
    res = pretrain(cfg, corpus, out)
    _manifest(out, "pretrain", cfg, checkpoint=res.checkpoint, loss_csv=out / "loss.csv",
              first10=res.mean_total(0, 10), last10=res.mean_total(len(res.log) - 10, len(res.log)))
    print(f"pretrained {cfg.total_steps} steps; checkpoint {res.checkpoint}")


def cmd_finetune(args):
    cfg = replace(_config(args), mode="finetune")
    if args.steps is not None:
        cfg = replace(cfg, total_steps=args.steps)
    params, cfg = _load_model(args, cfg)
    corpus = _corpus(args, cfg)
    out = _outdir(args.out)
    res = finetune(cfg, params, corpus, out)
    _manifest(out, "finetune", cfg, final_mae=res.final_mae, checkpoint=res.checkpoint)
    print(f"finetuned; final MAE {res.final_mae:.6g}")


def cmd_probe_lipschitz(args):
    params, cfg = _load_model(args, _config(args))
    corpus = _corpus(args, cfg)
    mols = _eval_molecules(corpus, args.split, args.max_molecules)
    rep = lipschitz_report(encoder_embed_fn(params, cfg), mols, args.steps, seed=cfg.seed, method=args.method)
    out = _outdir(args.out)
    rep.write(out)
    for row in rep.table():
        print(row[0], " ".join(f"{v:.4g}" for v in row[1:]))


def cmd_probe_heatmap(args):
    params, cfg = _load_model(args, _config(args))
    corpus = _corpus(args, cfg)
    conf: Conformation = corpus.molecules[args.molecule]
    grid = heatmap(encoder_embed_fn(params, cfg), conf, args.atom, extent=args.extent,
                   resolution=args.resolution)
    out = _outdir(args.out)
    grid.write(out / "heatmap.csv")
    print(f"heatmap max |dg| {grid.values.max():.4g}")


def cmd_probe_linear(args):
    cfg = replace(_config(args), mode="linear_probe")
    if args.steps is not None:
        cfg = replace(cfg, total_steps=args.steps)
    params, cfg = _load_model(args, cfg)
    corpus = _corpus(args, cfg)
    out = _outdir(args.out)
    res = linear_probe(cfg, params, corpus, out)
    print(f"linear probe final MAE {res.final_mae:.6g}")


def cmd_probe_ntk(args):
    from .model import init_readout
    params, cfg = _load_model(args, _config(args))
    params = {k: v for k, v in params.items() if not k.startswith("out.")}
    params.update(init_readout(cfg.encoder.hidden_dim, seed=cfg.seed + 7))
    corpus = _corpus(args, cfg)
    train = corpus.split("train")
    idx = np.arange(min(args.batch, len(train)))
    y = train.labels[cfg.target][idx]
    y = (y - y.mean()) / (y.std() or 1.0)
    rep = ntk_check(cfg, params, [train.molecules[i] for i in idx], y, args.steps, args.lr)
    out = _outdir(args.out)
    rep.write(out / "ntk.csv")
    for r in rep.ranges():
        print(*r)


def cmd_verify_score(args):
    cfg = _config(args)
    res = verify_score(n_centers=args.centers, steps=args.steps, seed=cfg.seed)
    out = _outdir(args.out)
    (out / "score.json").write_text(json.dumps({"cosine_mean": res.cosine_mean, "final_loss": res.final_loss,
                                                "n_centers": args.centers, "steps": args.steps}, indent=2))
    print(f"mean cosine to analytic score {res.cosine_mean:.4f}")


def _parse_grid(s: str) -> dict[str, list]:
    axes = {}
    for part in s.split(";"):
        if not part.strip():
            continue
        if "=" not in part:
            raise ValueError(f"bad grid axis {part!r}")
        k, v = part.split("=", 1)
        axes[k.strip()] = [float(x) for x in v.split(",") if x.strip()]
    return axes


def cmd_ablate(args):
    cfg = _config(args)
    if args.steps is not None:
        cfg = replace(cfg, total_steps=args.steps)
    corpus = _corpus(args, cfg)
    out = _outdir(args.out)
    rows = ablation_grid(cfg, _parse_grid(args.grid), corpus, args.finetune_steps, out / "ablation.csv")
    print(f"{len(rows)} ablation cells written to {out / 'ablation.csv'}")


COMMANDS = {
    "synth": cmd_synth, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
    "probe-lipschitz": cmd_probe_lipschitz, "probe-heatmap": cmd_probe_heatmap,
    "probe-linear": cmd_probe_linear, "probe-ntk": cmd_probe_ntk,
    "verify-score": cmd_verify_score, "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if not exc.code else 1
    if not args.command:
        parser.print_help(sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (ConfigError, XYZError, TrainingError, checkpoint.CheckpointError, ValueError, KeyError,
            IndexError, OSError) as exc:
        print(f"georecon {args.command}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
