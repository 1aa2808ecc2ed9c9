import numpy as np
import pytest
import torch

from sonardiff.datasets import generate_toy_sonar
from sonardiff.denoiser import Denoiser, DenoiserConfig
from sonardiff.model import SonarModel

torch.set_num_threads(1)

SMALL = DenoiserConfig(latent_channels=4, widths=(8, 16, 32), d_cond=16, heads=1, time_dim=16, groups=4)
CORPUS = [
    "image of SH34* ship on the AP238* seabed",
    "image of PL7* plane on the AS25* seabed",
    "image of CYM12* mine on the SEF4* seabed",
    "image of the AP637* seabed",
]


def perturb(module: torch.nn.Module, seed: int = 0, scale: float = 0.05):
    """Give zero-initialised layers non-trivial values so outputs depend on everything."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.add_(scale * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    return module


@pytest.fixture
def small_denoiser():
    torch.manual_seed(0)
    return perturb(Denoiser(SMALL)).eval()


@pytest.fixture
def small_model():
    model = SonarModel.create(CORPUS, seed=0, denoiser_config=SMALL)
    perturb(model.denoiser)
    return model.eval()


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy")
    return generate_toy_sonar(48, seed=3, out_dir=out)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance report ----------------------------------------------------------

ACCEPTANCE = {}  # criterion number -> (title, passed, detail)
EXPECTED = {}  # criterion number -> title, filled when the acceptance module is collected


def record_criterion(number: int, title: str, passed: bool, detail: str) -> bool:
    ACCEPTANCE[number] = (title, bool(passed), detail)
    return bool(passed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(set(EXPECTED) | set(ACCEPTANCE)):
        title, passed, detail = ACCEPTANCE.get(number, (EXPECTED.get(number), False, "not run or did not finish"))
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number}. {title}: {detail}")
