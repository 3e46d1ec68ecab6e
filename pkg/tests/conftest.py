import numpy as np
import pytest

from baltaml.episodes import EpisodeDistribution, sample_episode, synth_task_family
from baltaml.setenc import init_encoder
from baltaml.taskmodel import init_params


_ACCEPTANCE: list[str] = []


def record_acceptance(line: str) -> None:
    _ACCEPTANCE.append(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda l: int(l.split()[0][1:])):
            terminalreporter.write_line(line)


def small_model(seed=0, arch=(3, 6, 4), scalar_alpha=False, alpha_init=0.05):
    rng = np.random.default_rng(seed)
    params = init_params(list(arch), rng, alpha_init=alpha_init, scalar_alpha=scalar_alpha)
    psi = init_encoder(arch[0], params.n_layers, params.n_modulated, rng, nn1=(6,), nn2=(6,), head_hidden=5,
                       head_scale=0.5, sigma_bias=-1.0)
    return params, psi


def small_episode(seed=0, n_classes=4, dim=3, shots=None, regime=None, queries=3, shot_range=(1, 4)):
    rng = np.random.default_rng(seed)
    pools = synth_task_family("gaussian_blobs", {"dim": dim, "spread": 1.5}, rng)
    dist = EpisodeDistribution(n_classes=n_classes, shot_range=shot_range, queries_per_class=queries)
    return sample_episode(dist, pools["train"], rng, regime=regime, shots=shots)


@pytest.fixture
def model():
    return small_model()


@pytest.fixture
def episode():
    return small_episode()
