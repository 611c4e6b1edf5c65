import numpy as np
import pytest

from hiernas.common import OperatorKind
from hiernas.data import ToyDatasetSpec, gen_toy_dataset
from hiernas.search_space import BlockGenotype, CellGenotype, NetworkPath


@pytest.fixture
def small_spec():
    return ToyDatasetSpec(num_images=6, height=32, width=32, num_classes=3, seed=3)


@pytest.fixture
def small_dataset(small_spec):
    return gen_toy_dataset(small_spec)


@pytest.fixture
def cell2():
    """Two blocks touching every operator family."""
    return CellGenotype(
        (
            BlockGenotype(0, 1, OperatorKind.SEP_CONV_3X3, OperatorKind.SKIP_CONNECT),
            BlockGenotype(1, 2, OperatorKind.ATROUS_CONV_5X5_RATE2, OperatorKind.MAX_POOL_3X3),
        )
    )


@pytest.fixture
def cell3():
    return CellGenotype(
        (
            BlockGenotype(0, 1, OperatorKind.SEP_CONV_5X5, OperatorKind.AVG_POOL_3X3),
            BlockGenotype(0, 2, OperatorKind.ATROUS_CONV_3X3_RATE2, OperatorKind.SKIP_CONNECT),
            BlockGenotype(2, 3, OperatorKind.SEP_CONV_3X3, OperatorKind.MAX_POOL_3X3),
        )
    )


@pytest.fixture
def path4():
    return NetworkPath((8, 16, 8, 4))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
