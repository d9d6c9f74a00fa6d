import math
from pathlib import Path

import pytest

import seed_data
from priors import PriorPanel, PriorSpec, sids_misclassification_panel
from tables import load_table

ROOT_DIR = Path(__file__).parent.parent
CONFIG_DIR = ROOT_DIR / "configs"


@pytest.fixture
def config_dir():
    return CONFIG_DIR


@pytest.fixture(scope="session")
def recall_table():
    return load_table(seed_data.recall_cells())


@pytest.fixture(scope="session")
def recall_2x2(recall_table):
    return recall_table.to_two_by_two("Y", "X")


@pytest.fixture(scope="session")
def validation_table():
    return load_table(seed_data.validation_cells())


@pytest.fixture(scope="session")
def selection_table():
    return load_table(seed_data.selection_cells())


@pytest.fixture(scope="session")
def misclassification_panel():
    return sids_misclassification_panel()


@pytest.fixture(scope="session")
def confounder_panel():
    return PriorPanel.of(
        PriorSpec.normal("beta_T", math.log(0.25 / 0.75), 0.25),
        PriorSpec.normal("beta_TX", math.log(2.0), 0.25),
        PriorSpec.normal("beta_TY", math.log(2.0), 0.25),
    )


@pytest.fixture(scope="session")
def crude_prior():
    return PriorSpec.normal("beta_XY", 0.0, 0.5)
