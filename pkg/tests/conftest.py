import pytest

from georecon.data import synth_corpus
from georecon.geometry import Conformation
from georecon.model import DecoderConfig, EncoderConfig, init_params


@pytest.fixture(scope="session")
def small_corpus():
    return synth_corpus(seed=3, n_molecules=40, atoms_range=(3, 8))


@pytest.fixture(scope="session")
def tiny_encoder():
    return EncoderConfig(num_layers=2, hidden_dim=8, cutoff=5.0, max_z=10, num_rbf=6)


@pytest.fixture(scope="session")
def tiny_params(tiny_encoder):
    return init_params(tiny_encoder, DecoderConfig(depth=2), seed=11)


def random_molecule(rng, n, scale=1.3, species=(1, 6, 8)):
    return Conformation(rng.choice(species, size=n), scale * rng.standard_normal((n, 3)))


@pytest.fixture(scope="session")
def trained_run(small_corpus, tiny_encoder):
    """A short GeoRecon-weighted pretraining run shared by several test modules."""
    from georecon.config import RunConfig, ScheduleConfig
    from georecon.training import pretrain

    cfg = RunConfig(seed=0, batch_size=4, total_steps=400, sigma=0.1, encoder=tiny_encoder,
                    decoder=DecoderConfig(depth=2),
                    schedule=ScheduleConfig(peak_lr=3e-3, lr_min=1e-5, warmup_steps=20, cosine_length=400))
    return cfg, pretrain(cfg, small_corpus)
