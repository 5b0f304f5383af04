import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from psbayes import Dataset, ResponseModel, RngHandle


@pytest.fixture
def six_row_logit():
    """Hand-built dataset for the grid-search MLE oracle (1 covariate)."""
    x = np.array([[-1.5], [-0.6], [0.2], [0.8], [1.4], [2.1]])
    delta = np.array([0, 0, 1, 0, 1, 1])
    y = np.where(delta == 1, [0, 0, 1.3, 0, -0.4, 2.2], np.nan)
    return Dataset(x, y, delta)


@pytest.fixture
def mar_dataset():
    """Moderate MAR dataset with a known-form generating response model."""
    gen = RngHandle(314).generator
    n = 400
    x = np.column_stack([gen.normal(1.0, 1.0, n), gen.normal(-0.5, 2.0, n)])
    y_full = 1.5 + 2.0 * x[:, 0] - x[:, 1] + gen.standard_normal(n)
    from scipy.special import expit

    delta = (gen.uniform(size=n) < expit(0.4 + 0.6 * x[:, 0])).astype(int)
    return Dataset(x, np.where(delta == 1, y_full, np.nan), delta)


@pytest.fixture
def mar_model():
    return ResponseModel(link="logit", x_cols=(0, 1))
