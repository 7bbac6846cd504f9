import pytest
import torch

from msfiqa.model import BackboneConfig, MultiStageIQA
from msfiqa.synth import FIXTURE_SPEC, SynthSpec, generate


@pytest.fixture(scope="session")
def fixture_synth(tmp_path_factory):
    """2 references x 2 types x 3 levels, 48x48."""
    return generate(FIXTURE_SPEC, tmp_path_factory.mktemp("synth_fixture"))


@pytest.fixture(scope="session")
def desk_synth(tmp_path_factory):
    """5 references x 3 types x 4 levels, 64x64."""
    return generate(SynthSpec(), tmp_path_factory.mktemp("synth_desk"))


@pytest.fixture(scope="session")
def imbalanced_synth(tmp_path_factory):
    spec = SynthSpec(n_references=40, levels_per_type=5, image_size=(32, 32), imbalanced=True, seed=3)
    return generate(spec, tmp_path_factory.mktemp("synth_imbalanced"))


def small_config(side=32, **kw):
    return BackboneConfig.from_preset("Desk", side, **kw)


@pytest.fixture
def desk_model():
    torch.manual_seed(0)
    return MultiStageIQA(BackboneConfig.from_preset("Desk"))


# acceptance criteria register their outcome here; printed in the terminal summary
ACCEPTANCE_RESULTS: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS, key=lambda k: int(k.split()[0][2:])):
        terminalreporter.write_line(ACCEPTANCE_RESULTS[key])
