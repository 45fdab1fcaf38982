"""Graph-level reconstruction pretraining for 3D molecules, with the probes used to study it."""

from .autodiff import Tape, Tensor, backward, check_gradients, jvp, vjp
from .config import RunConfig, ScheduleConfig, load_config
from .data import Corpus, ToyPotential, parse_xyz, synth_corpus, write_xyz
from .geometry import (Conformation, NoiseTriple, center, kabsch_align, project_nonrigid,
                       rigid_basis, sample_noise_triple)
from .model import (DecoderConfig, EncoderConfig, GeoReconModel, denoise_head, encode, init_params,
                    linear_head, pool, recon_decode, spectral_factors)
from .objectives import (LossWeights, ScoreOracle, analytic_mixture_score, dsm_target, loss_cln,
                         loss_nsd, loss_rec, total_loss)
from .probes import heatmap, lipschitz_power, lipschitz_report, noise_robustness_check, ntk_check
from .training import ablation_grid, finetune, linear_probe, lr_at, optimizer_step, pretrain

__version__ = "0.1.0"
